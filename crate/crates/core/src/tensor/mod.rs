//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Every model equation is assembled from the operations on [`Tape`], so any
//! composed quantity can be checked against finite differences.

mod dense;
mod kernels;
mod tape;

pub use dense::Tensor;
pub use tape::{BinaryOp, Gradients, Reduction, Tape, UnaryOp, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    RaggedRows,
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("range [{from}, {to}) out of bounds for length {len}")]
    RangeOutOfBounds { from: usize, to: usize, len: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a single element, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; call reset_backward first")]
    BackwardTwice,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

#[cfg(test)]
mod tests;
