#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod commands;
pub mod config;

pub use config::{parse_config, parse_config_str, Config, ConfigError};
