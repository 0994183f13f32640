//! Full-reference quality metrics: SNR, PSNR, RMSE, SSIM maps and their
//! means, plus signed map differences for visual comparison.
//!
//! Conventions, fixed for the whole crate:
//! - `snr(test, reference)` is asymmetric: the numerator is the variance of
//!   the *test* image, the denominator the squared error between the two.
//! - `psnr` is defined through the shared RMSE path as
//!   `20*log10(255/rmse)`, so the two metrics can never drift apart.
//! - SSIM uses an 8x8 window sliding over valid positions only (map size
//!   `(w-7) x (h-7)`), population statistics, and the 8-bit stabilizers
//!   `c1 = (0.01*255)^2`, `c2 = (0.03*255)^2`, `c3 = c2/2`. With that `c3`
//!   the three-factor luminance/contrast/structure product collapses to the
//!   familiar two-term form, which is what is implemented.
//! - Identical inputs produce `f64::INFINITY` for SNR and PSNR.

use ndarray::Array2;

use crate::error::{ensure_same_shape, Error, Result};
use crate::image::{quantize_u8, GrayImage};

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 6.5025; // (0.01 * 255)^2
const C2: f64 = 58.5225; // (0.03 * 255)^2
const FULL_SCALE: f64 = 255.0;

// ============================================================================
// Scalar metrics
// ============================================================================

fn mse(test: &GrayImage, reference: &GrayImage) -> Result<f64> {
    ensure_same_shape(
        (test.width(), test.height()),
        (reference.width(), reference.height()),
    )?;
    let n = (test.width() * test.height()) as f64;
    let sum: f64 = test
        .plane()
        .iter()
        .zip(reference.plane().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Signal-to-noise ratio in dB. Infinite for identical images; a constant
/// test image against a different reference yields `-inf`.
pub fn snr(test: &GrayImage, reference: &GrayImage) -> Result<f64> {
    ensure_same_shape(
        (test.width(), test.height()),
        (reference.width(), reference.height()),
    )?;
    let n = (test.width() * test.height()) as f64;
    let mean: f64 = test.plane().iter().sum::<f64>() / n;
    let signal: f64 = test.plane().iter().map(|&v| (v - mean) * (v - mean)).sum();
    let error: f64 = test
        .plane()
        .iter()
        .zip(reference.plane().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    if error == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / error).log10())
}

/// Root mean square error.
pub fn rmse(test: &GrayImage, reference: &GrayImage) -> Result<f64> {
    Ok(mse(test, reference)?.sqrt())
}

/// Peak signal-to-noise ratio in dB against the 8-bit full scale.
pub fn psnr(test: &GrayImage, reference: &GrayImage) -> Result<f64> {
    let rmse = rmse(test, reference)?;
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (FULL_SCALE / rmse).log10())
}

// ============================================================================
// SSIM
// ============================================================================

/// Per-window SSIM values over all valid 8x8 window positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimMap {
    values: Array2<f64>,
}

impl SsimMap {
    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Mean of the map under the chosen convention.
    pub fn mean(&self, convention: MssimConvention) -> f64 {
        let n = self.values.len() as f64;
        match convention {
            MssimConvention::MeanOfMap => self.values.iter().sum::<f64>() / n,
            MssimConvention::MeanOfSquaredMap => {
                self.values.iter().map(|&v| v * v).sum::<f64>() / n
            }
        }
    }

    /// Signed per-window difference `self - other`.
    pub fn diff(&self, other: &SsimMap) -> Result<Array2<f64>> {
        ensure_same_shape(
            (self.width(), self.height()),
            (other.width(), other.height()),
        )?;
        Ok(&self.values - &other.values)
    }

    /// Renders the map as grayscale bytes via the affine carry
    /// `[-1, 1] -> [0, 255]`.
    pub fn to_gray(&self) -> GrayImage {
        let plane = self.values.mapv(|v| (v + 1.0) * 0.5 * FULL_SCALE);
        GrayImage::from_plane(plane).expect("ssim values are finite")
    }

    /// Reads back a map rendered by [`SsimMap::to_gray`].
    pub fn from_gray(img: &GrayImage) -> SsimMap {
        SsimMap {
            values: img.plane().mapv(|v| v / FULL_SCALE * 2.0 - 1.0),
        }
    }
}

/// How the scalar MSSIM is reduced from the SSIM map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MssimConvention {
    /// Plain mean of the per-window values (the default).
    #[default]
    MeanOfMap,
    /// Mean of the squared per-window values.
    MeanOfSquaredMap,
}

/// Summed-area table with a zero top row and left column, so any window sum
/// is four lookups.
fn integral(src: &Array2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut sat = Array2::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row_sum = 0.0;
        for x in 0..w {
            row_sum += f(src[[y, x]]);
            sat[[y + 1, x + 1]] = sat[[y, x + 1]] + row_sum;
        }
    }
    sat
}

fn window_sum(sat: &Array2<f64>, x: usize, y: usize, n: usize) -> f64 {
    sat[[y + n, x + n]] - sat[[y, x + n]] - sat[[y + n, x]] + sat[[y, x]]
}

/// SSIM map over all valid 8x8 window positions. Both images must be at
/// least 8 pixels in each dimension.
pub fn ssim_map(test: &GrayImage, reference: &GrayImage) -> Result<SsimMap> {
    ensure_same_shape(
        (test.width(), test.height()),
        (reference.width(), reference.height()),
    )?;
    let n = SSIM_WINDOW;
    if test.width() < n || test.height() < n {
        return Err(Error::precondition(format!(
            "SSIM needs at least {n}x{n} pixels, got {}x{}",
            test.width(),
            test.height()
        )));
    }
    let a = test.plane();
    let b = reference.plane();
    let sat_a = integral(a, |v| v);
    let sat_b = integral(b, |v| v);
    let sat_aa = integral(a, |v| v * v);
    let sat_bb = integral(b, |v| v * v);
    let mut ab = Array2::zeros(a.raw_dim());
    ndarray::Zip::from(&mut ab).and(a).and(b).for_each(|o, &x, &y| *o = x * y);
    let sat_ab = integral(&ab, |v| v);

    let inv_count = 1.0 / (n * n) as f64;
    let out_w = test.width() - n + 1;
    let out_h = test.height() - n + 1;
    let mut values = Array2::zeros((out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            let mu_a = window_sum(&sat_a, x, y, n) * inv_count;
            let mu_b = window_sum(&sat_b, x, y, n) * inv_count;
            let var_a = window_sum(&sat_aa, x, y, n) * inv_count - mu_a * mu_a;
            let var_b = window_sum(&sat_bb, x, y, n) * inv_count - mu_b * mu_b;
            let cov = window_sum(&sat_ab, x, y, n) * inv_count - mu_a * mu_b;
            let luminance = (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1);
            let structure = (2.0 * cov + C2) / (var_a + var_b + C2);
            values[[y, x]] = luminance * structure;
        }
    }
    Ok(SsimMap { values })
}

/// Scalar MSSIM.
pub fn mssim(
    test: &GrayImage,
    reference: &GrayImage,
    convention: MssimConvention,
) -> Result<f64> {
    Ok(ssim_map(test, reference)?.mean(convention))
}

// ============================================================================
// Signed map rendering
// ============================================================================

/// Renders a signed plane as RGB bytes: zero is white, positive values shade
/// toward red, negative toward blue, scaled by the largest magnitude. An
/// all-zero plane renders pure white.
pub fn render_signed_map(values: &Array2<f64>) -> Vec<u8> {
    let scale = values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut rgb = Vec::with_capacity(values.len() * 3);
    for &v in values.iter() {
        if scale == 0.0 || v == 0.0 {
            rgb.extend([255, 255, 255]);
            continue;
        }
        let fade = 255 - quantize_u8(v.abs() / scale * FULL_SCALE);
        if v > 0.0 {
            rgb.extend([255, fade, fade]);
        } else {
            rgb.extend([fade, fade, 255]);
        }
    }
    rgb
}

// ============================================================================
// Combined report
// ============================================================================

/// All four scalar metrics for one test/reference pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub snr_db: f64,
    pub psnr_db: f64,
    pub rmse: f64,
    pub mssim: f64,
}

pub fn quality_report(
    test: &GrayImage,
    reference: &GrayImage,
    convention: MssimConvention,
) -> Result<QualityReport> {
    Ok(QualityReport {
        snr_db: snr(test, reference)?,
        psnr_db: psnr(test, reference)?,
        rmse: rmse(test, reference)?,
        mssim: mssim(test, reference, convention)?,
    })
}

// ============================================================================
// Tests
// ============================================================================
