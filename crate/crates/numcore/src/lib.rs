//! Differentiable numerical backbone: dense tensors, a recorded-operation
//! graph with reverse-mode gradients, and the Adam optimizer.
//!
//! The engine is generic over the element type so the same code runs in f32
//! for training and in f64 for finite-difference gradient checks.

mod adam;
mod conv;
mod graph;
mod params;
mod scalar;
mod tensor;

pub mod checkpoint;
pub mod rng;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, NodeId};
pub use params::{ParamId, ParamSet, Parameter};
pub use scalar::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch, expected {expected:?} but got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: invalid input, {reason}")]
    InvalidInput { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("gaussian_nll: std must be strictly positive, found {value} at index {index}")]
    NonPositiveStd { value: f64, index: usize },
    #[error("adam_step: non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },
    #[error("parameter name '{0}' already registered")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;
