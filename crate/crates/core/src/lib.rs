//! Temporally consistent progressive learning for one-shot tracklet re-identification.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod autodiff;
pub mod corpus;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod sampling;
mod scalar;
pub mod selftrain;

pub use scalar::Scalar;

pub use autodiff::{AutodiffError, Graph, NodeId, Sgd, Tensor};
pub use corpus::{Corpus, CorpusError, EvalSplit, GeneratorConfig, SplitMode, Tracklet};
pub use evaluation::{EvalError, EvalReport};
pub use losses::{LossError, LossVariant, LossWeights};
pub use model::{Checkpoint, Model, ModelDims, ModelError};
pub use sampling::{SamplerConfig, SamplingError};
pub use selftrain::{run_tcpl, PseudoLabel, StepMetrics, TcplConfig, TcplError, TcplRun, Trainer};

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type GraphF64 = Graph<f64>;
pub type GraphF32 = Graph<f32>;
pub type ModelF64 = Model<f64>;
pub type ModelF32 = Model<f32>;
pub type CheckpointF64 = Checkpoint<f64>;
pub type CheckpointF32 = Checkpoint<f32>;
pub type TrainerF64 = Trainer<f64>;
pub type TrainerF32 = Trainer<f32>;
