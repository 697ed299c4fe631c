//! Differentiable separation models and their training loop: Conv-TasNet
//! with STFT or learned bases, the iSRNet refinement network, tensor
//! versions of the objectives, checkpoints, and the trainer.

pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod error;
pub mod isrnet;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tasnet;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelSeparator, ModelSpec, SeparationModel};
pub use params::ParamStore;
pub use train::{Trainer, TrainConfig};
