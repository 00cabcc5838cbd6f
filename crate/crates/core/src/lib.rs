//! Low-light RAW image enhancement with a two-stage pyramid diffusion model.
//!
//! The pipeline covers the whole path from a mosaiced sensor frame to an
//! enhanced RAW image and its quality metrics:
//!
//! - [`rawproc`]: Bayer packing, normalization, and the conditional input
//!   stack (positional encoding + histogram equalization).
//! - [`noisespace`]: a calibrated noise-parameter space, its even partition
//!   into virtual cameras, and physics-based noisy-image synthesis
//!   (shot, read, row, and quantization noise).
//! - [`schedule`]: forward/reverse diffusion math with a resolution-switching
//!   (pyramid) schedule.
//! - [`graph`] / [`tensor`]: a minimal reverse-mode autodiff engine.
//! - [`denoiser`]: a small conditional U-Net noise predictor with
//!   per-virtual-camera feature-integration pathways, pathway averaging, and
//!   exact structural reparameterization into plain convolutions.
//! - [`color_corrector`]: global color-shift correction driven by pooled
//!   image features and the current timestep.
//! - [`trainer`]: the two training stages, Adam, and checkpointing.
//! - [`sampler_eval`]: full reverse-process enhancement plus PSNR/SSIM.
//! - [`cli`] / [`config`]: the command-line surface and run configuration.
//!
//! See the crate examples for one runnable program per capability.

pub mod cli;
pub mod color_corrector;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod graph;
pub mod noisespace;
pub mod rawproc;
pub mod sampler_eval;
pub mod scenes;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
