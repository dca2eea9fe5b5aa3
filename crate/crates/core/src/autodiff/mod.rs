//! Dense tensors with a reverse-mode tape, sized for small MLPs.

mod subnet;
mod tape;
mod tensor;

pub use subnet::{vjp_sum_outputs, DenseVars, SubNetwork, SubNetworkTrace};
pub use tape::{sigmoid, Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("tape node {0} consumes an input recorded after it")]
    CorruptTape(usize),
    #[error("activation {0} has no registered second derivative")]
    NoSecondDerivative(&'static str),
}
