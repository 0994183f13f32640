//! Block transforms for collaborative filtering: an orthonormal 2D DCT, a
//! periodized biorthogonal 1.5 wavelet, an orthonormal Haar transform for
//! the group axis, and the Kaiser aggregation window.
//!
//! The wavelet uses circular (periodized) boundary handling. Analysis is
//! correlation form, `a[i] = sum_k lo[k] * x[(2i + k) mod n]`, and synthesis
//! scatters with the reconstruction pair below; with these filters the
//! round trip is exact at every power-of-two length down to 4.

use ndarray::{Array2, ArrayViewMut2};

use crate::error::{Error, Result};

// ============================================================================
// Filter bank (biorthogonal 1.5)
// ============================================================================

const SQRT2_OVER_256: f64 = std::f64::consts::SQRT_2 / 256.0;

macro_rules! scaled {
    ($($v:expr),* $(,)?) => { [$(($v) as f64 * SQRT2_OVER_256),*] };
}

/// Decomposition lowpass: symmetric 10-tap spline dual filter.
const DEC_LO: [f64; 10] = scaled![3, -3, -22, 22, 128, 128, 22, -22, -3, 3];
/// Decomposition highpass: Haar-type difference, center-aligned.
const DEC_HI: [f64; 10] = scaled![0, 0, 0, 0, -128, 128, 0, 0, 0, 0];
/// Reconstruction lowpass: Haar-type average, center-aligned.
const REC_LO: [f64; 10] = scaled![0, 0, 0, 0, 128, 128, 0, 0, 0, 0];
/// Reconstruction highpass, phased so that analysis + synthesis telescope to
/// the identity with no extra shifts.
const REC_HI: [f64; 10] = scaled![-3, -3, 22, 22, -128, 128, -22, -22, 3, 3];

fn bior15_step_forward(x: &[f64], approx: &mut [f64], detail: &mut [f64]) {
    let n = x.len();
    for i in 0..n / 2 {
        let mut a = 0.0;
        let mut d = 0.0;
        for k in 0..10 {
            let s = x[(2 * i + k) % n];
            a += DEC_LO[k] * s;
            d += DEC_HI[k] * s;
        }
        approx[i] = a;
        detail[i] = d;
    }
}

fn bior15_step_inverse(approx: &[f64], detail: &[f64], x: &mut [f64]) {
    let n = x.len();
    x.fill(0.0);
    for i in 0..n / 2 {
        for k in 0..10 {
            x[(2 * i + k) % n] += approx[i] * REC_LO[k] + detail[i] * REC_HI[k];
        }
    }
}

// ============================================================================
// 2D block transforms
// ============================================================================

/// Which separable 2D transform a filtering stage runs on its blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform2d {
    /// Full-depth periodized biorthogonal 1.5 wavelet.
    Bior15,
    /// Orthonormal type-II discrete cosine transform.
    Dct,
}

/// Reusable transform for square blocks of one fixed size.
#[derive(Clone, Debug)]
pub struct BlockTransform {
    kind: Transform2d,
    size: usize,
    /// Orthonormal DCT matrix, row `k`: `s_k * cos(pi*(2i+1)*k / 2n)`.
    dct: Array2<f64>,
}

impl BlockTransform {
    pub fn new(kind: Transform2d, size: usize) -> Result<Self> {
        if !size.is_power_of_two() || size < 4 {
            return Err(Error::parameter(format!(
                "block transform size must be a power of two >= 4, got {size}"
            )));
        }
        let n = size as f64;
        let dct = Array2::from_shape_fn((size, size), |(k, i)| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos()
        });
        Ok(BlockTransform { kind, size, dct })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn forward(&self, mut block: ArrayViewMut2<f64>) {
        debug_assert_eq!(block.dim(), (self.size, self.size));
        match self.kind {
            Transform2d::Dct => self.dct_apply(&mut block, false),
            Transform2d::Bior15 => self.bior_apply(&mut block, false),
        }
    }

    pub fn inverse(&self, mut block: ArrayViewMut2<f64>) {
        debug_assert_eq!(block.dim(), (self.size, self.size));
        match self.kind {
            Transform2d::Dct => self.dct_apply(&mut block, true),
            Transform2d::Bior15 => self.bior_apply(&mut block, true),
        }
    }

    /// Separable sandwich `C * B * C^T` (or transposed for the inverse).
    fn dct_apply(&self, block: &mut ArrayViewMut2<f64>, inverse: bool) {
        let n = self.size;
        let m = &self.dct;
        let mut tmp = vec![0.0; n * n];
        // Rows: tmp = B * M^T (forward) or B * M (inverse).
        for r in 0..n {
            for k in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    let w = if inverse { m[[i, k]] } else { m[[k, i]] };
                    acc += block[[r, i]] * w;
                }
                tmp[r * n + k] = acc;
            }
        }
        // Columns.
        for k in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    let w = if inverse { m[[i, k]] } else { m[[k, i]] };
                    acc += tmp[i * n + c] * w;
                }
                block[[k, c]] = acc;
            }
        }
    }

    /// Pyramidal 2D wavelet: per level transform the rows then the columns
    /// of the shrinking top-left subsquare (the inverse mirrors this).
    fn bior_apply(&self, block: &mut ArrayViewMut2<f64>, inverse: bool) {
        let n = self.size;
        let mut line = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        let mut sizes = Vec::new();
        {
            let mut s = n;
            while s >= 2 {
                sizes.push(s);
                s /= 2;
            }
        }
        if inverse {
            sizes.reverse();
        }
        for &s in &sizes {
            for r in 0..s {
                for c in 0..s {
                    line[c] = block[[r, c]];
                }
                if inverse {
                    let (a, d) = line[..s].split_at(s / 2);
                    bior15_step_inverse(a, d, &mut scratch[..s]);
                } else {
                    let (a, d) = scratch[..s].split_at_mut(s / 2);
                    bior15_step_forward(&line[..s], a, d);
                }
                for c in 0..s {
                    block[[r, c]] = scratch[c];
                }
            }
            for c in 0..s {
                for r in 0..s {
                    line[r] = block[[r, c]];
                }
                if inverse {
                    let (a, d) = line[..s].split_at(s / 2);
                    bior15_step_inverse(a, d, &mut scratch[..s]);
                } else {
                    let (a, d) = scratch[..s].split_at_mut(s / 2);
                    bior15_step_forward(&line[..s], a, d);
                }
                for r in 0..s {
                    block[[r, c]] = scratch[r];
                }
            }
        }
    }
}

fn checked_square(block: &Array2<f64>) -> Result<usize> {
    let (h, w) = block.dim();
    if h != w {
        return Err(Error::parameter(format!(
            "block must be square, got {w}x{h}"
        )));
    }
    Ok(h)
}

/// Orthonormal 2D DCT of one square power-of-two block.
pub fn dct2d(block: &Array2<f64>) -> Result<Array2<f64>> {
    let t = BlockTransform::new(Transform2d::Dct, checked_square(block)?)?;
    let mut out = block.clone();
    t.forward(out.view_mut());
    Ok(out)
}

pub fn idct2d(coeffs: &Array2<f64>) -> Result<Array2<f64>> {
    let t = BlockTransform::new(Transform2d::Dct, checked_square(coeffs)?)?;
    let mut out = coeffs.clone();
    t.inverse(out.view_mut());
    Ok(out)
}

/// Full-depth periodized biorthogonal 1.5 analysis of one square block.
pub fn dwt2d_bior15(block: &Array2<f64>) -> Result<Array2<f64>> {
    let t = BlockTransform::new(Transform2d::Bior15, checked_square(block)?)?;
    let mut out = block.clone();
    t.forward(out.view_mut());
    Ok(out)
}

pub fn idwt2d_bior15(coeffs: &Array2<f64>) -> Result<Array2<f64>> {
    let t = BlockTransform::new(Transform2d::Bior15, checked_square(coeffs)?)?;
    let mut out = coeffs.clone();
    t.inverse(out.view_mut());
    Ok(out)
}

// ============================================================================
// Group-axis Haar
// ============================================================================

/// Full-depth orthonormal Haar, in place. Length must be a power of two;
/// length 1 is the identity.
pub fn haar_forward(v: &mut [f64]) {
    debug_assert!(v.len().is_power_of_two());
    let mut scratch = vec![0.0; v.len()];
    let mut len = v.len();
    while len >= 2 {
        for i in 0..len / 2 {
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            scratch[i] = (a + b) * std::f64::consts::FRAC_1_SQRT_2;
            scratch[len / 2 + i] = (a - b) * std::f64::consts::FRAC_1_SQRT_2;
        }
        v[..len].copy_from_slice(&scratch[..len]);
        len /= 2;
    }
}

pub fn haar_inverse(v: &mut [f64]) {
    debug_assert!(v.len().is_power_of_two());
    let mut scratch = vec![0.0; v.len()];
    let mut len = 2;
    while len <= v.len() {
        for i in 0..len / 2 {
            let (a, d) = (v[i], v[len / 2 + i]);
            scratch[2 * i] = (a + d) * std::f64::consts::FRAC_1_SQRT_2;
            scratch[2 * i + 1] = (a - d) * std::f64::consts::FRAC_1_SQRT_2;
        }
        v[..len].copy_from_slice(&scratch[..len]);
        len *= 2;
    }
}

/// Full-depth orthonormal Haar of a power-of-two-length vector.
pub fn haar1d(v: &[f64]) -> Result<Vec<f64>> {
    if !v.len().is_power_of_two() {
        return Err(Error::parameter(format!(
            "length must be a power of two, got {}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    haar_forward(&mut out);
    Ok(out)
}

pub fn ihaar1d(v: &[f64]) -> Result<Vec<f64>> {
    if !v.len().is_power_of_two() {
        return Err(Error::parameter(format!(
            "length must be a power of two, got {}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    haar_inverse(&mut out);
    Ok(out)
}

// ============================================================================
// Kaiser window
// ============================================================================

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 1.0;
    while term > sum * 1e-17 {
        term *= q / (m * m);
        sum += term;
        m += 1.0;
    }
    sum
}

/// 2D Kaiser window (outer product of the 1D window), used to weight block
/// contributions during aggregation. Strictly positive everywhere.
pub fn kaiser2d(n: usize, beta: f64) -> Array2<f64> {
    assert!(n >= 2, "window needs at least two samples per side");
    let denom = bessel_i0(beta);
    let one_d: Vec<f64> = (0..n)
        .map(|i| {
            let t = (2 * i) as f64 / (n - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - t * t).sqrt()) / denom
        })
        .collect();
    Array2::from_shape_fn((n, n), |(r, c)| one_d[r] * one_d[c])
}

// ============================================================================
// Tests
// ============================================================================
