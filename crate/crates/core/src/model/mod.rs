//! The noise-prediction UNet and its shared / task-exclusive parameter split.

mod config;
mod embedding;
mod params;
mod unet;

pub use config::{Conditioning, ModelConfig, StagePosition};
pub use embedding::timestep_embedding;
pub(crate) use params::init_exclusive as params_init_exclusive;
pub use params::{init_model, parameter_partition, ModelParams, Partition, Route, Tensor};
pub use unet::{BatchItem, Denoiser, SlotSpec, Unet};

use crate::diffusion::ImageTensor;
use crate::Result;

/// One-off noise prediction. Hot loops should build a [`Denoiser`] once.
pub fn predict_noise(
    params: &ModelParams,
    config: &ModelConfig,
    x_t: &ImageTensor,
    t: usize,
    task: Option<usize>,
) -> Result<ImageTensor> {
    let unet = Unet::new(config)?;
    Denoiser::new(&unet, params, task)?.predict(x_t, t)
}
