//! Minimal per-sample layer kernels with hand-written backward passes.
//!
//! Everything operates on a single CHW sample stored row-major. Kernels are
//! generic over [`Scalar`] so the same network code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod layers;
mod scalar;

pub use layers::{
    concat_channels, dense_backward, dense_forward, silu, silu_backward, upsample2x,
    upsample2x_backward, Conv2d, ConvCache, GroupNorm, NormCache,
};
pub use scalar::{matmul, Scalar};
