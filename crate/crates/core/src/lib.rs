//! Conditional denoising-diffusion engine.
//!
//! Everything here is pure computation over `alloc`; file formats, the CLI
//! and other IO live in the companion `diffusion-cli` crate.
//!
//! - [`autodiff`]: dense `f64` tensors with a reverse-mode tape.
//! - [`schedule`]: linear-beta noise schedule, forward noising and the
//!   ancestral reverse step.
//! - [`denoiser`]: the conditional noise-prediction U-Net.
//! - [`sampler`]: classifier-free guided ancestral sampling.
//! - [`trainer`]: noise-prediction loss, AdamW and the EMA shadow.
//! - [`metrics`]: Fréchet distance between Gaussian feature statistics.
//! - [`dataset`]: procedural labelled shapes and preprocessing.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod dataset;
pub mod denoiser;
mod error;
pub mod math;
pub mod metrics;
mod params;
pub mod rng;
pub mod sampler;
pub mod schedule;
mod tensor;
pub mod trainer;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use schedule::Schedule;
pub use tensor::Tensor;
