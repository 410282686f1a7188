//! Multi-task denoising diffusion with a UNet split into shared parameters
//! and per-task exclusive stages.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffusion`]: variance schedules, the closed-form forward process and
//!   the ancestral reverse step.
//! * [`model`]: the noise-prediction UNet, its parameter partition and the
//!   baseline conditioning modes.
//! * [`trainer`]: task-mixture training with Adam, new-task fine-tuning and
//!   a finite-difference gradient check.
//! * [`data`]: IDX / CIFAR ingestion, class-to-task partitioning and batch
//!   streams.
//! * [`metrics`]: SSIM, Fréchet distance over pluggable features and the
//!   evaluation report.

pub mod data;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
