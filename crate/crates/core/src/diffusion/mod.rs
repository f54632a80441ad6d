//! Conditional pixel-space denoiser, its noise schedule, objective and samplers.

pub mod loss;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod train;
pub mod unet;

pub use loss::{ldm_loss, Conditioned, Denoiser, NoiseDraw};
pub use params::{Bound, ParamSubset, Params};
pub use sampler::{sample, Sampler};
pub use schedule::NoiseSchedule;
pub use text::Vocabulary;
pub use train::{pretrain, TrainConfig, TrainReport};
pub use unet::{UNet, UNetConfig};
