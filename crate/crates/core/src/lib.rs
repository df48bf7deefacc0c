//! Pose-conditional image-to-image diffusion for novel view synthesis.
//!
//! The crate trains a two-frame, weight-shared denoiser on posed view pairs,
//! generates novel views autoregressively with stochastic conditioning, and
//! measures the 3D consistency of generated views by fitting a
//! view-independent neural field to them.
//!
//! Module map:
//! - [`geometry`]: poses, pinhole rays, positional encodings, pose embeddings
//! - [`diffusion`]: log-SNR schedule, forward process, ancestral step, guidance
//! - [`model`]: X-UNet and Concat-UNet denoisers, regression mode
//! - [`training`]: optimisation loop, EMA, checkpoints
//! - [`sampling`]: stochastic-conditioning and naive samplers, trajectories
//! - [`scenes`]: synthetic multi-view dataset generation and loading
//! - [`scoring`]: neural-field consistency scoring and image metrics
//! - [`cli`]: command-line entry point

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod image;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod scenes;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
