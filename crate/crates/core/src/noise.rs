//! Seeded multiplicative (speckle) noise with a calibrated variance target.
//!
//! The model is `u0 = u * (1 + eta)` with `eta ~ N(0, v)` i.i.d. per pixel.
//! The multiplier variance is derived from the requested effective additive
//! variance: `v = sigma2_target / mean(u^2)`, so before clamping the
//! expected pixel-domain MSE between `u0` and `u` equals `sigma2_target`.
//! Output pixels are clamped to `[0, 255]`.
//!
//! The sample stream is pinned: ChaCha8 keyed by the seed, mapped to unit
//! uniforms from the top 53 bits, turned into normals by Box-Muller. A fixed
//! seed therefore reproduces the identical noise field on any platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::image::GrayImage;

const FULL_SCALE_SQUARED: f64 = 255.0 * 255.0;

// ============================================================================
// Gaussian stream
// ============================================================================

/// Deterministic standard-normal stream (ChaCha8 + Box-Muller).
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform sample in the open interval (0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        // Top 53 bits, offset by half an ulp so the value is never zero.
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal sample.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

// ============================================================================
// Noise specification
// ============================================================================

/// Noise model selector. Only the multiplicative Gaussian model exists today;
/// the enum keeps file formats and configs explicit about what was applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseModel {
    MultiplicativeGaussian,
}

/// Everything needed to regenerate a noise field exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    /// Target effective additive variance in the pixel domain (pre-clamp
    /// `E[(u0 - u)^2]`).
    pub sigma2_target: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma2_target: f64, seed: u64) -> Result<Self> {
        if !sigma2_target.is_finite() || sigma2_target <= 0.0 {
            return Err(Error::parameter(format!(
                "sigma2_target must be finite and positive, got {sigma2_target}"
            )));
        }
        Ok(NoiseSpec {
            model: NoiseModel::MultiplicativeGaussian,
            sigma2_target,
            seed,
        })
    }

    /// Builds a spec from a normalized noise level, the multiplier variance
    /// quoted against the full 8-bit scale (`v = level / 255^2`). The
    /// effective additive variance then depends on the image it will be
    /// applied to: `sigma2_target = level * mean(u^2) / 255^2`.
    pub fn from_normalized_level(level: f64, reference: &GrayImage, seed: u64) -> Result<Self> {
        if !level.is_finite() || level <= 0.0 {
            return Err(Error::parameter(format!(
                "noise level must be finite and positive, got {level}"
            )));
        }
        let ms = reference.mean_square();
        if ms == 0.0 {
            return Err(Error::precondition(
                "cannot calibrate noise against an all-zero image",
            ));
        }
        NoiseSpec::new(level * ms / FULL_SCALE_SQUARED, seed)
    }
}

// ============================================================================
// Application
// ============================================================================

/// Applies seeded speckle noise; output is clamped to `[0, 255]`.
pub fn add_speckle(img: &GrayImage, spec: &NoiseSpec) -> Result<GrayImage> {
    let NoiseModel::MultiplicativeGaussian = spec.model;
    let ms = img.mean_square();
    if ms == 0.0 {
        return Err(Error::precondition(
            "cannot add calibrated multiplicative noise to an all-zero image",
        ));
    }
    let mult_sigma = (spec.sigma2_target / ms).sqrt();
    let mut stream = GaussianStream::new(spec.seed);
    // Row-major order fixes the pixel-to-sample pairing.
    let noisy = img
        .plane()
        .iter()
        .map(|&u| (u * (1.0 + mult_sigma * stream.next_normal())).clamp(0.0, 255.0))
        .collect();
    GrayImage::from_vec(img.width(), img.height(), noisy)
}

// ============================================================================
// Tests
// ============================================================================
