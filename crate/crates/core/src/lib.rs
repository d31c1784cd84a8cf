pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod selftest;
pub mod stream;
pub mod tensor;
pub mod train;

pub use arch::{Architecture, LayerKind, LayerSpec};
pub use autodiff::{Graph, Mode, Var};
pub use error::{CheckpointError, Error, Result};
pub use model::{BranchSet, HybridModel, ModelSettings};
pub use tensor::Tensor;
