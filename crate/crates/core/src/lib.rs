//! Patch-based cascaded pixel diffusion for video frame interpolation.
//!
//! One conditional denoiser serves two roles: base prediction of the middle
//! frame between two inputs, and recursive patchwise 2x upsampling of its
//! own coarser prediction. The cascade always denoises fixed-size patches
//! and merges their per-step results over a full-resolution latent, so the
//! largest tensor the network ever sees is one patch regardless of output
//! resolution.
//!
//! Modules:
//! - [`schedule`]: noise schedule, velocity parameterization, sampler
//! - [`model`]: the conditional U-Net, checkpoint format
//! - [`cascade`]: patch grids, pyramid inference, patch merging
//! - [`data`]: triplet datasets, augmentation, synthetic scenes
//! - [`trainer`]: training loops with conditioning dropout
//! - [`metrics`]: PSNR/SSIM, benchmark protocols, sweeps, instrumentation

pub mod cascade;
pub mod data;
pub mod error;
pub mod exec;
pub mod frame;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use frame::Frame;
