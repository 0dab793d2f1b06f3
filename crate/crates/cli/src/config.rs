//! Flat `key=value` run configuration.
//!
//! Blank lines and everything after `#` are ignored. Keys are namespaced
//! (`run.*`, `ssl.*`, `mom.*`, `gate.*`, `head.*`, `data.*`); unknown keys,
//! malformed values and constraint violations are reported with their line.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use genhead::datasets::{GeneratorKind, SyntheticSpec};
use genhead::heads::HeadKind;
use genhead::moments::{Centering, MAX_ORDER};
use genhead::outlier::Aggregation;
use genhead::pipeline::{MomView, RunConfig};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Every key the parser accepts, in echo order.
pub const KEYS: &[&str] = &[
    "run.seed",
    "run.steps",
    "run.batch",
    "run.unlabeled_ratio",
    "run.lr",
    "run.momentum",
    "run.weight_decay",
    "run.clip_norm",
    "run.ema_decay",
    "run.eval_every",
    "ssl.tau",
    "ssl.lambda_u",
    "ssl.curriculum",
    "mom.orders",
    "mom.weights",
    "mom.mode",
    "mom.view",
    "gate.mode",
    "gate.percentile",
    "gate.refresh",
    "head.kind",
    "head.latent",
    "head.hidden",
    "data.kind",
    "data.classes",
    "data.ambient",
    "data.n_unlabeled",
    "data.n_test",
    "data.labels_per_class",
    "data.noise",
    "data.nuisance_dims",
    "data.nuisance_scale",
    "data.warp",
    "data.outlier_frac",
    "data.seed",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub run: RunConfig,
    pub data: SyntheticSpec,
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("`{value}`: {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let r = &mut self.run;
        let d = &mut self.data;
        match key {
            "run.seed" => r.seed = parse(value)?,
            "run.steps" => r.steps = parse(value)?,
            "run.batch" => r.batch = parse(value)?,
            "run.unlabeled_ratio" => r.unlabeled_ratio = parse(value)?,
            "run.lr" => r.lr = parse(value)?,
            "run.momentum" => r.momentum = parse(value)?,
            "run.weight_decay" => r.weight_decay = parse(value)?,
            "run.clip_norm" => r.clip_norm = parse(value)?,
            "run.ema_decay" => r.ema_decay = parse(value)?,
            "run.eval_every" => r.eval_every = parse(value)?,
            "ssl.tau" => r.tau_conf = parse(value)?,
            "ssl.lambda_u" => r.lambda_u = parse(value)?,
            "ssl.curriculum" => r.curriculum = parse_bool(value)?,
            "mom.orders" => {
                let p: usize = parse(value)?;
                if p > MAX_ORDER {
                    return Err(format!("at most {MAX_ORDER} orders are supported, got {p}"));
                }
                r.mom.max_order = p;
            }
            "mom.weights" => {
                let w: Vec<f64> = parse_list(value)?;
                if w.len() != MAX_ORDER {
                    return Err(format!("expected {MAX_ORDER} comma-separated weights"));
                }
                if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return Err("weights must be finite and non-negative".into());
                }
                r.mom.weights.copy_from_slice(&w);
            }
            "mom.mode" => r.mom.centering = value.parse::<Centering>()?,
            "mom.view" => r.mom_view = value.parse::<MomView>()?,
            "gate.mode" => match value {
                "off" => r.gate.enabled = false,
                other => {
                    r.gate.aggregation = other.parse::<Aggregation>().map_err(|_| {
                        format!("unknown gate mode `{other}` (expected off, max or min)")
                    })?;
                    r.gate.enabled = true;
                }
            },
            "gate.percentile" => {
                let q: f64 = parse(value)?;
                if !(q > 0.0 && q <= 100.0) {
                    return Err(format!("percentile must lie in (0, 100], got {q}"));
                }
                r.gate.percentile = q;
            }
            "gate.refresh" => r.gate.refresh = parse(value)?,
            "head.kind" => r.head = value.parse::<HeadKind>().map_err(|e| e.to_string())?,
            "head.latent" => r.latent = parse(value)?,
            "head.hidden" => r.hidden = parse_list(value)?,
            "data.kind" => d.kind = value.parse::<GeneratorKind>()?,
            "data.classes" => d.classes = parse(value)?,
            "data.ambient" => d.ambient = parse(value)?,
            "data.n_unlabeled" => d.n_unlabeled = parse(value)?,
            "data.n_test" => d.n_test = parse(value)?,
            "data.labels_per_class" => d.labels_per_class = parse(value)?,
            "data.noise" => d.noise = parse(value)?,
            "data.nuisance_dims" => d.nuisance_dims = parse(value)?,
            "data.nuisance_scale" => d.nuisance_scale = parse(value)?,
            "data.warp" => d.warp = parse(value)?,
            "data.outlier_frac" => d.outlier_frac = parse(value)?,
            "data.seed" => d.seed = parse(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Effective value of `key` as it would be written back.
    pub fn get(&self, key: &str) -> Option<String> {
        let r = &self.run;
        let d = &self.data;
        Some(match key {
            "run.seed" => r.seed.to_string(),
            "run.steps" => r.steps.to_string(),
            "run.batch" => r.batch.to_string(),
            "run.unlabeled_ratio" => r.unlabeled_ratio.to_string(),
            "run.lr" => r.lr.to_string(),
            "run.momentum" => r.momentum.to_string(),
            "run.weight_decay" => r.weight_decay.to_string(),
            "run.clip_norm" => r.clip_norm.to_string(),
            "run.ema_decay" => r.ema_decay.to_string(),
            "run.eval_every" => r.eval_every.to_string(),
            "ssl.tau" => r.tau_conf.to_string(),
            "ssl.lambda_u" => r.lambda_u.to_string(),
            "ssl.curriculum" => r.curriculum.to_string(),
            "mom.orders" => r.mom.max_order.to_string(),
            "mom.weights" => join(&r.mom.weights),
            "mom.mode" => r.mom.centering.to_string(),
            "mom.view" => r.mom_view.to_string(),
            "gate.mode" => {
                if r.gate.enabled {
                    r.gate.aggregation.to_string()
                } else {
                    "off".into()
                }
            }
            "gate.percentile" => r.gate.percentile.to_string(),
            "gate.refresh" => r.gate.refresh.to_string(),
            "head.kind" => r.head.to_string(),
            "head.latent" => r.latent.to_string(),
            "head.hidden" => join(&r.hidden),
            "data.kind" => d.kind.to_string(),
            "data.classes" => d.classes.to_string(),
            "data.ambient" => d.ambient.to_string(),
            "data.n_unlabeled" => d.n_unlabeled.to_string(),
            "data.n_test" => d.n_test.to_string(),
            "data.labels_per_class" => d.labels_per_class.to_string(),
            "data.noise" => d.noise.to_string(),
            "data.nuisance_dims" => d.nuisance_dims.to_string(),
            "data.nuisance_scale" => d.nuisance_scale.to_string(),
            "data.warp" => d.warp.to_string(),
            "data.outlier_frac" => d.outlier_frac.to_string(),
            "data.seed" => d.seed.to_string(),
            _ => return None,
        })
    }

    /// Cross-field checks on the complete configuration.
    pub fn validate(&self) -> Result<(), String> {
        self.run.validate().map_err(|e| e.to_string())?;
        self.data.validate().map_err(|e| e.to_string())
    }

    /// Every key with its effective value, one `key=value` per line.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Hex SHA-256 of the echo, truncated to 12 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    /// Output directory name for this configuration.
    pub fn run_name(&self) -> String {
        format!("{}-s{}", self.hash(), self.run.seed)
    }
}

/// Parses configuration text on top of the defaults and validates the result.
pub fn parse_config_str(text: &str) -> Result<Config, ConfigError> {
    let mut cfg = Config::default();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| ConfigError::Line { line, msg };
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got `{body}`")))?;
        cfg.set(key.trim(), value.trim()).map_err(err)?;
        last_line = line;
    }
    cfg.validate().map_err(|msg| {
        if last_line == 0 {
            ConfigError::Invalid(msg)
        } else {
            ConfigError::Line {
                line: last_line,
                msg,
            }
        }
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_config_str(&text)
}

/// Applies `key=value` overrides to a parsed configuration.
pub fn apply_overrides(cfg: &mut Config, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|m| ConfigError::Invalid(format!("override `{o}`: {m}")))?;
    }
    cfg.validate().map_err(ConfigError::Invalid)
}
