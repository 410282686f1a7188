//! Variance schedules, the closed-form forward process and ancestral sampling.
//!
//! All functions here are pure given their inputs. Steps are 1-based:
//! `t = 1` is the least noisy latent and `t = T` the most.

mod image;
mod process;
mod schedule;

pub use image::{ImageTensor, Shape};
pub use process::{denoise_step, diffuse, reverse_from, sample_chain};
pub use schedule::{build_linear_schedule, NoiseSchedule, SigmaMode};
