//! Despeckling toolkit for 8-bit grayscale images.
//!
//! The crate covers the full experimental loop for multiplicative
//! (speckle) noise:
//!
//! - [`noise`]: seeded speckle synthesis with a calibrated target variance,
//! - [`nsp`]: a shift-invariant (undecimated) pyramid with K-sigma hard
//!   thresholding and per-layer gains,
//! - [`bm3d`]: two-stage collaborative filtering (hard-threshold estimate,
//!   then empirical Wiener refinement),
//! - [`mlfe`]: multi-layer fusion enhancement that builds an improved pilot
//!   image for the final Wiener stage,
//! - [`metrics`]: full-reference quality measures (SNR, PSNR, RMSE, SSIM
//!   maps and their means),
//! - [`synth`]: deterministic test scenes used by benchmarks and tests,
//! - [`image`]: 8-bit PGM/PNG I/O and line profiles.
//!
//! All pipelines are deterministic: a fixed seed and parameter set produce
//! byte-identical outputs regardless of thread count.

pub mod bm3d;
pub mod error;
pub mod image;
pub mod metrics;
pub mod mlfe;
pub mod noise;
pub mod nsp;
pub mod synth;

pub use error::{Error, Result};
