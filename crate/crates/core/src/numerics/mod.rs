//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamConfig, OptimizerState};
pub use params::{LayerNorm, Linear, ParamId, ParamStore};
pub use tape::{Adjacency, AttentionLayout, ComputeGraph, Gradients, OpKind, Var, MASK_FILL};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
