//! ConvLR: recurrent reconstruction of golden-angle radial interventional MRI.
//!
//! The crate is organised bottom-up:
//!
//! - [`kspace`]: golden-angle trajectories, the exact non-uniform DFT and its
//!   adjoint, density compensation, regridding and the Toeplitz normal operator.
//! - [`simdata`]: synthetic head phantoms, cannula insertion sequences,
//!   augmentation and on-disk datasets.
//! - [`autodiff`]: a small tape-based reverse-mode engine over `f64` grids.
//! - [`network`]: encoder, Conv-LSTM cell, deconvolution head, initializer and
//!   the soft-projection data-consistency layer composed into the recurrent model.
//! - [`training`]: the four-term loss, discriminator and adversarial training loop.
//! - [`baseline`]: single-coil GRASP-style temporal-TV compressed sensing.
//! - [`metrics`]: SSIM, PSNR, NMSE, ROI variants and report aggregation.

pub mod autodiff;
pub mod baseline;
pub mod error;
pub mod fft;
pub mod image;
pub mod kspace;
pub mod metrics;
pub mod network;
pub mod simdata;
pub mod training;

pub use error::{Error, Result};
pub use image::ComplexImage;
