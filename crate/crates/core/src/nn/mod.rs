//! Minimal dense 3D network toolkit: tensors, convolutions, a reverse-mode
//! tape, SGD and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
mod graph;
pub mod ops;
pub mod optim;
mod tensor;

pub use conv::ConvSpec;
pub use graph::{Gradients, Graph, ParamId, ParamSet, Parameter, Var};
pub use optim::{sgd_step, SgdSchedule};
pub use tensor::{Real, Tensor};
