//! Zero-shot style transfer with a toy pixel-space diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] dense `f64` matrices, softmax, seeded noise, ZSTR files
//! * [`attention`] fusion kernels (self, style-cross, simple addition,
//!   rearranged) and region control
//! * [`diffusion`] schedules, forward noising, DDIM stepping and inversion
//! * [`denoiser`] a small attention U-Net with capture/injection hooks and
//!   its trainer
//! * [`stylize`] the dual-path transfer pipeline and ablation sweeps
//! * [`analysis`] heatmaps, logit histograms and the content/style metrics
//! * [`data`] synthetic content/style image families and PNG I/O

pub mod analysis;
pub mod attention;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod numerics;
pub mod stylize;

mod error;

pub use error::{Error, Result};
