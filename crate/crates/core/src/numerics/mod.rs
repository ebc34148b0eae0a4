//! Dense `f64` tensors, a recorded differentiation trace, parameter storage
//! and the Adam optimizer.

mod gradcheck;
mod graph;
mod optim;
mod store;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradReport};
pub use graph::{softmax_rows, Graph, Var};
pub use optim::{adam_step, AdamConfig};
pub use store::{ParamId, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("feature dimension {dim} not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
