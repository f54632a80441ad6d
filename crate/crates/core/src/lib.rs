pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod verify;

pub use autodiff::{Graph, GradRecord, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor, TensorError};
