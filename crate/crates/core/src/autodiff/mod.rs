//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The tape is define-by-run: callers rebuild it for every evaluation,
//! record parameters as leaves, and call [`Tape::backward`] on a scalar
//! root. The primitive set is the closure needed by the occupancy MLP, its
//! losses, and the Rodrigues rotation of view planes.

mod adam;
mod ops;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;

pub(crate) use tape::{gemm, softmax_row};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in `{op}`: input shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("`{op}` expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("`{op}` outside its domain: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },
    #[error("parameter group `{group}`: expected {expected} values, got {got}")]
    GroupShape {
        group: String,
        expected: usize,
        got: usize,
    },
}

#[cfg(test)]
mod tests;
