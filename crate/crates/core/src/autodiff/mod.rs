//! Dense reverse-mode differentiation and the SGD optimizer used for every loss.

mod gradcheck;
mod graph;
mod optim;
mod primitive;
mod tensor;

pub use gradcheck::{check_gradients, relative_error};
pub use graph::{Graph, NodeId};
pub use optim::Sgd;
pub use primitive::{Primitive, NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("backward needs a one-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("graph has already been differentiated")]
    DoubleBackward,
    #[error("{0} produced a non-finite value")]
    NonFiniteValue(String),
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("parameter {0} has a non-finite gradient")]
    NonFiniteGradient(usize),
    #[error("{0} parameter tensors but {1} gradients")]
    ParamCount(usize, usize),
}
