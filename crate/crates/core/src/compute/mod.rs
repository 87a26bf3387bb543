//! Dense 2-D tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{causal_mask, Gradients, Graph, StAnchor, Var};
#[allow(unused_imports)]
pub(crate) use graph::sigmoid;
pub use real::{DType, Real};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ComputeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward needs a scalar, got shape {0:?}")]
    NotScalar([usize; 2]),
    #[error("function is not deterministic for a fixed seed")]
    NonDeterministicFunction,
    #[error("straight-through anchors do not match the replayed graph")]
    AnchorMismatch,
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
