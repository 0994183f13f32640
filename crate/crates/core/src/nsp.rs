//! Nonsubsampled (shift-invariant) pyramid with K-sigma hard thresholding.
//!
//! The decomposition is the additive a-trous form: at each level the running
//! approximation is smoothed with an upsampled lowpass kernel (holes of
//! `2^(level-1)` zeros between taps) and the detail layer is the difference
//! `previous - smoothed`. Reconstruction is the plain sum of the lowpass
//! residual and every detail layer, so the round trip telescopes and is
//! exact for any kernel and boundary rule.
//!
//! Detail layers are stored coarse to fine: `layers()[0]` is the coarsest
//! band and the last layer carries most of the noise energy.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Scale factor between the median absolute deviation and the standard
/// deviation of a zero-mean Gaussian.
const MAD_TO_SIGMA: f64 = 0.6745;

/// Gain applied to the second-finest detail layer by [`threshold_denoise`],
/// strengthening texture and boundary coefficients before reconstruction.
const DETAIL_BOOST: f64 = 2.0;

pub const DEFAULT_LEVELS: usize = 4;

// ============================================================================
// Configuration
// ============================================================================

/// Prototype lowpass kernel for the pyramid. Both integrate to one exactly,
/// so constant regions pass through unchanged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PyramidFilter {
    /// 7-tap maxflat halfband kernel `[-1, 0, 9, 16, 9, 0, -1] / 32`.
    #[default]
    Maxflat7,
    /// 5-tap B3-spline kernel `[1, 4, 6, 4, 1] / 16`.
    Spline5,
}

impl PyramidFilter {
    pub fn taps(self) -> &'static [f64] {
        const MAXFLAT7: [f64; 7] = [
            -1.0 / 32.0,
            0.0,
            9.0 / 32.0,
            16.0 / 32.0,
            9.0 / 32.0,
            0.0,
            -1.0 / 32.0,
        ];
        const SPLINE5: [f64; 5] = [
            1.0 / 16.0,
            4.0 / 16.0,
            6.0 / 16.0,
            4.0 / 16.0,
            1.0 / 16.0,
        ];
        match self {
            PyramidFilter::Maxflat7 => &MAXFLAT7,
            PyramidFilter::Spline5 => &SPLINE5,
        }
    }
}

/// Edge handling for the smoothing passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Half-sample mirror: `... b a | a b c ... z | z y ...`.
    #[default]
    Symmetric,
    /// Circular wrap. Makes the decomposition commute exactly with circular
    /// shifts of the input.
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NspConfig {
    /// Number of detail layers, 2 to 6.
    pub levels: usize,
    pub filter: PyramidFilter,
    pub boundary: BoundaryMode,
}

impl Default for NspConfig {
    fn default() -> Self {
        NspConfig {
            levels: DEFAULT_LEVELS,
            filter: PyramidFilter::default(),
            boundary: BoundaryMode::default(),
        }
    }
}

impl NspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.levels) {
            return Err(Error::parameter(format!(
                "pyramid levels must be in 2..=6, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Smallest image dimension the deepest level's kernel still fits into.
    pub fn min_dimension(&self) -> usize {
        (self.filter.taps().len() - 1) * (1 << (self.levels - 1)) + 1
    }

    fn check_image(&self, img: &GrayImage) -> Result<()> {
        self.validate()?;
        let min = self.min_dimension();
        if img.width() < min || img.height() < min {
            return Err(Error::precondition(format!(
                "image {}x{} too small for {} pyramid levels (needs at least {min} per side)",
                img.width(),
                img.height(),
                self.levels
            )));
        }
        Ok(())
    }
}

// ============================================================================
// Pyramid stack
// ============================================================================

/// Decomposition result: detail layers ordered coarse to fine plus the
/// lowpass residual, all at full image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidStack {
    layers: Vec<Array2<f64>>,
    lowpass: Array2<f64>,
}

impl PyramidStack {
    /// Assembles a stack from raw planes, all of which must share a shape.
    pub fn from_parts(layers: Vec<Array2<f64>>, lowpass: Array2<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::parameter("pyramid stack needs at least one layer"));
        }
        if layers.iter().any(|l| l.dim() != lowpass.dim()) {
            return Err(Error::parameter(
                "pyramid layers and lowpass must share dimensions",
            ));
        }
        Ok(PyramidStack { layers, lowpass })
    }

    pub fn levels(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.lowpass.ncols()
    }

    pub fn height(&self) -> usize {
        self.lowpass.nrows()
    }

    /// Detail layers, coarse to fine.
    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.layers
    }

    /// Finest detail layer; under noise it carries most of the noise energy.
    pub fn finest(&self) -> &Array2<f64> {
        self.layers.last().expect("stack is never empty")
    }

    pub fn lowpass(&self) -> &Array2<f64> {
        &self.lowpass
    }

    /// Returns a copy with the 1-based indexed layer (coarse to fine)
    /// multiplied by `gain`; every other plane is untouched.
    pub fn scale_layer(&self, index: usize, gain: f64) -> Result<PyramidStack> {
        if index == 0 || index > self.levels() {
            return Err(Error::parameter(format!(
                "layer index {index} out of range 1..={}",
                self.levels()
            )));
        }
        if !gain.is_finite() {
            return Err(Error::parameter(format!("gain must be finite, got {gain}")));
        }
        let mut out = self.clone();
        out.layers[index - 1].mapv_inplace(|v| v * gain);
        Ok(out)
    }
}

// ============================================================================
// Decomposition and reconstruction
// ============================================================================

fn reflect_index(i: i64, n: i64) -> usize {
    // Half-sample reflection has period 2n.
    let p = 2 * n;
    let mut m = i % p;
    if m < 0 {
        m += p;
    }
    if m < n {
        m as usize
    } else {
        (p - 1 - m) as usize
    }
}

fn wrap_index(i: i64, n: i64) -> usize {
    let mut m = i % n;
    if m < 0 {
        m += n;
    }
    m as usize
}

/// Separable smoothing with the kernel upsampled by `spacing`.
fn smooth(src: &Array2<f64>, taps: &[f64], spacing: usize, boundary: BoundaryMode) -> Array2<f64> {
    let (h, w) = src.dim();
    let radius = (taps.len() / 2) as i64;
    let spacing = spacing as i64;
    let index = |i: i64, n: i64| -> usize {
        match boundary {
            BoundaryMode::Symmetric => reflect_index(i, n),
            BoundaryMode::Periodic => wrap_index(i, n),
        }
    };

    // Horizontal pass.
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                let off = (t as i64 - radius) * spacing;
                acc += tap * src[[y, index(x as i64 + off, w as i64)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                let off = (t as i64 - radius) * spacing;
                acc += tap * tmp[[index(y as i64 + off, h as i64), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Decomposes an image into `cfg.levels` detail layers plus a lowpass
/// residual.
pub fn decompose(img: &GrayImage, cfg: &NspConfig) -> Result<PyramidStack> {
    cfg.check_image(img)?;
    let taps = cfg.filter.taps();
    let mut current = img.plane().clone();
    // Built fine to coarse, stored coarse to fine.
    let mut details = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let approx = smooth(&current, taps, 1 << level, cfg.boundary);
        details.push(&current - &approx);
        current = approx;
    }
    details.reverse();
    PyramidStack::from_parts(details, current)
}

/// Sums the lowpass residual and every detail layer.
pub fn reconstruct(stack: &PyramidStack) -> Result<GrayImage> {
    let mut acc = stack.lowpass.clone();
    for layer in &stack.layers {
        acc += layer;
    }
    GrayImage::from_plane(acc)
}

// ============================================================================
// Noise estimation and thresholding
// ============================================================================

fn median_inplace(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let hi = *m;
    if values.len() % 2 == 1 {
        hi
    } else {
        // Even count: average with the largest of the lower partition.
        let lo = values[..mid]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        (lo + hi) / 2.0
    }
}

/// Robust noise level of a coefficient plane: median absolute coefficient
/// scaled to Gaussian sigma (MAD estimator).
pub fn estimate_sigma(plane: &Array2<f64>) -> f64 {
    let mut mags: Vec<f64> = plane.iter().map(|v| v.abs()).collect();
    median_inplace(&mut mags) / MAD_TO_SIGMA
}

/// Keeps coefficients with magnitude at or above the threshold, zeroing the
/// rest. A threshold of zero keeps everything.
pub fn hard_threshold(plane: &Array2<f64>, threshold: f64) -> Array2<f64> {
    plane.mapv(|c| if c.abs() >= threshold { c } else { 0.0 })
}

/// Per-layer multipliers for the K-sigma rule, ordered coarse to fine.
/// The default keeps K = 3 everywhere except the noise-dominated finest
/// layer, which uses K = 4.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdPolicy {
    pub k: Vec<f64>,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            k: vec![3.0, 3.0, 3.0, 4.0],
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.k.len() != levels {
            return Err(Error::parameter(format!(
                "threshold policy has {} factors but the pyramid has {levels} levels",
                self.k.len()
            )));
        }
        if self.k.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return Err(Error::parameter(
                "threshold factors must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// Pyramid-domain despeckling: per-layer K-sigma hard threshold (each layer's
/// sigma from its own MAD), a fixed 2x boost of the second-finest layer to
/// strengthen texture and boundaries, then reconstruction. The lowpass
/// residual is never thresholded.
pub fn threshold_denoise(
    img: &GrayImage,
    policy: &ThresholdPolicy,
    cfg: &NspConfig,
) -> Result<GrayImage> {
    policy.validate(cfg.levels)?;
    let mut stack = decompose(img, cfg)?;
    for (layer, &k) in stack.layers_mut().iter_mut().zip(&policy.k) {
        let sigma = estimate_sigma(layer);
        *layer = hard_threshold(layer, k * sigma);
    }
    let boosted = stack.scale_layer(cfg.levels - 1, DETAIL_BOOST)?;
    reconstruct(&boosted)
}

// ============================================================================
// Debug dump
// ============================================================================

/// Writes a stack into `dir` as one PGM per plane plus a `stack.json`
/// manifest.
///
/// Detail layers land in `layer-1.pgm` (coarsest) through `layer-N.pgm`
/// plus `lowpass.pgm`. Each plane is affine-mapped onto `[0, 255]` so that
/// signed coefficients survive quantization; the manifest records the
/// per-plane `min`/`max` needed to invert the map (a constant plane renders
/// as mid-gray with `min == max`).
pub fn dump_stack(stack: &PyramidStack, dir: &Path) -> Result<()> {
    use std::fmt::Write as _;

    std::fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })?;

    let mut planes: Vec<(String, &Array2<f64>)> = stack
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| (format!("layer-{}.pgm", i + 1), layer))
        .collect();
    planes.push(("lowpass.pgm".to_string(), stack.lowpass()));

    let mut json = format!(
        "{{\n  \"width\": {},\n  \"height\": {},\n  \"levels\": {},\n  \
         \"ordering\": \"coarse-to-fine\",\n  \"planes\": [\n",
        stack.width(),
        stack.height(),
        stack.levels(),
    );
    let last = planes.len() - 1;
    for (i, (name, plane)) in planes.iter().enumerate() {
        let (lo, hi) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let mapped = if hi > lo {
            plane.mapv(|v| (v - lo) * 255.0 / (hi - lo))
        } else {
            Array2::from_elem(plane.dim(), 127.5)
        };
        crate::image::write_image(&GrayImage::from_plane(mapped)?, dir.join(name))?;
        let comma = if i == last { "" } else { "," };
        writeln!(
            json,
            "    {{\"file\": \"{name}\", \"min\": {lo}, \"max\": {hi}}}{comma}"
        )
        .expect("writing to a string cannot fail");
    }
    json.push_str("  ]\n}\n");

    let path = dir.join("stack.json");
    std::fs::write(&path, json).map_err(|source| Error::Write { path, source })
}

// ============================================================================
// Tests
// ============================================================================
