//! Dense registration-error regressor: a small reverse-mode tensor engine,
//! the dual-UNet + Swin-UNETR model, its loss, trainer and evaluator.

pub mod autograd;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::NetError;
pub use model::{ErrorNet, ModelConfig, OutputActivation, ParamStore};
pub use tensor::{Real, Tensor};
