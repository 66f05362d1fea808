//! Variational splitting encoder-decoder.
//!
//! Jointly decomposes a superimposed two-channel image into its constituent
//! channels while removing pixel noise. The pieces:
//!
//! - [`data`]: synthetic two-channel structures, noise injection, dataset
//!   splits, patch extraction, raw+manifest dataset IO.
//! - [`noisemodel`]: signal-conditioned pixel noise models (Gaussian mixture
//!   and histogram variants): fitting, evaluation, sampling, serialization.
//! - [`nn`]: the small tensor toolkit the model needs — channels-last conv
//!   kernels, nearest upsampling, Adam.
//! - [`vse`]: the hierarchical encoder/decoder with per-level posteriors, a
//!   top-down conditional prior, and a two-channel output head.
//! - [`objective`]: ELBO-style training loss with Gaussian or noise-model
//!   likelihood heads and the two KL weighting modes.
//! - [`training`]: optimization loop, validation, metrics log, checkpoints.
//! - [`inference`]: posterior sampling, MMSE estimates, uncertainty maps, and
//!   tiled full-frame prediction.
//! - [`calibration`]: per-channel uncertainty scalars and RMV/RMSE curves.
//! - [`metrics`]: range-invariant PSNR and multi-scale SSIM.
//! - [`expconfig`] + [`cli`]: declarative experiment configs and the command
//!   line surface.

pub mod calibration;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod expconfig;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod noisemodel;
pub mod objective;
pub mod rng;
pub mod training;
pub mod vse;

pub use error::{Result, VsplitError};
