//! Layer stacks for the teacher and student networks: specs, parameters,
//! exact forward/backward passes and gradient verification.

mod gradcheck;
mod model;
pub mod presets;
mod spec;

pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{BatchNormStats, ForwardPass, Gradients, Mode, Model};
pub use spec::{LayerSpec, ModelSpec};

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("layer {index} ({layer}): {reason}")]
    InvalidLayer {
        index: usize,
        layer: &'static str,
        reason: String,
    },
    #[error("layer {index} ({layer}) expects input {expected}, got {found:?}")]
    Composition {
        index: usize,
        layer: &'static str,
        expected: String,
        found: Vec<usize>,
    },
    #[error("batch shape {found:?} does not match model input {expected:?}")]
    BatchShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("layer {index}: dropout in train mode needs a random generator")]
    MissingRng { index: usize },
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("parameter shape mismatch: {0}")]
    ParamShape(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[cfg(test)]
mod tests;
