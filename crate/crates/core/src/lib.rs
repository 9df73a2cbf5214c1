//! Building blocks for diffusion-based video virtual try-on.
//!
//! - [`data`]: clips, masks, DensePose, the agnostic video and the 9-channel denoiser input
//! - [`codec`]: a fixed linear latent codec
//! - [`edm`]: EDM preconditioning, the denoising score-matching loss and Euler sampling
//! - [`agnostic_loss`]: the mask-guided attention loss and its gradient
//! - [`attention`]: attention with garment and temporal key/value concatenation
//! - [`keyframes`]: pose-guided keyframe selection and long-clip orchestration
//! - [`metrics`]: SSIM, flicker and a metric registry
//! - [`clip_io`]: clip directories on disk

pub mod agnostic_loss;
pub mod attention;
pub mod clip_io;
pub mod codec;
pub mod data;
pub mod edm;
pub mod error;
pub mod keyframes;
pub mod metrics;

pub use error::{Error, Result};
