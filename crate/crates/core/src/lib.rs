//! Cross-modal volume translation with a pyramid-convolution, channel- and
//! self-attention GAN, built on a small volumetric autodiff engine.
//!
//! Module map:
//! - [`tensor`]: volumes, the differentiation tape, 3-D kernels, gradient checks
//! - [`attention`]: channel attention, grouped attention weighting, patch self-attention
//! - [`net`]: the generator and the residual discriminator
//! - [`losses`]: adversarial, L1 and (MS-)SSIM losses plus MAE/PSNR/SSIM metrics
//! - [`data`]: synthetic paired volumes, normalisation and the volume file format
//! - [`trainer`]: Adam, the alternating training loop and checkpoints
//! - [`config`]: the run configuration file
//! - [`oracle`]: brute-force reference implementations used for verification

pub mod attention;
pub mod config;
pub mod data;
mod error;
pub mod layers;
pub mod losses;
pub mod net;
pub mod oracle;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Volume};
