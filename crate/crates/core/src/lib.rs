//! Mutual learning for pairs of variational Bayesian neural networks with
//! parameter-space and feature-space diversity losses.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
pub use tensor::Tensor;
