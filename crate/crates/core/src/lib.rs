//! Generative classification heads for semi-supervised learning.
//!
//! The crate provides a small reverse-mode autodiff engine, axis-aligned
//! Gaussian mixture and KMeans final layers, method-of-moments constraints on
//! the latent embedding, a Mahalanobis outlier gate, and a pseudo-labeling
//! training pipeline on synthetic data.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to `f64`, which is what training and gradient checks use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod moments;
pub mod optim;
pub mod outlier;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use autodiff::{clip_global_norm, Graph, ParamId, ParamStore, Parameter, Var};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
