//! Two-stage collaborative filtering.
//!
//! Stage one (basic estimate): group similar blocks by exhaustive window
//! search on the noisy image, hard-threshold the group spectrum in a 3D
//! transform domain (2D wavelet per block, Haar along the group axis), and
//! aggregate the filtered blocks into a weighted-mean canvas. Stage two
//! (final estimate): regroup using a pilot image, then empirically Wiener
//! shrink the noisy spectrum using the pilot spectrum, aggregating the same
//! way but with DCT blocks.
//!
//! Reference blocks are processed in parallel but contributions are
//! aggregated in a fixed row-major order, so results are bit-identical for
//! any thread count.

mod transforms;

pub use transforms::{
    dct2d, dwt2d_bior15, haar1d, idct2d, idwt2d_bior15, ihaar1d, kaiser2d, BlockTransform,
    Transform2d,
};

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;

use crate::error::{ensure_same_shape, Error, Result};
use crate::image::GrayImage;

use transforms::{haar_forward, haar_inverse};

/// Rows of reference positions processed per parallel batch. Fixed so the
/// aggregation order (and thus the output) is independent of thread count.
const ROW_BAND: usize = 8;

// ============================================================================
// Profile
// ============================================================================

/// Parameter set for one filtering stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bm3dProfile {
    /// Block side length; power of two, at least 4.
    pub block: usize,
    /// Stride between reference blocks; the last row/column is always swept.
    pub step: usize,
    /// Half-width of the square search window around the reference.
    pub search_radius: usize,
    /// Group size cap; power of two for the group-axis Haar.
    pub group_max: usize,
    /// Match cutoff: candidates join while mean squared difference per pixel
    /// is at most `match_threshold * sigma^2`.
    pub match_threshold: f64,
    /// Hard-threshold multiplier for stage one (`lambda3d * sigma`).
    pub lambda3d: f64,
    /// Assumed additive-noise standard deviation in gray levels.
    pub sigma: f64,
    pub transform2d: Transform2d,
    /// Kaiser aggregation-window shape parameter.
    pub window_beta: f64,
}

impl Bm3dProfile {
    /// Stage-one defaults (wavelet blocks, permissive matching).
    pub fn basic(sigma: f64) -> Self {
        Bm3dProfile {
            block: 8,
            step: 3,
            search_radius: 19,
            group_max: 16,
            match_threshold: 2500.0,
            lambda3d: 2.7,
            sigma,
            transform2d: Transform2d::Bior15,
            window_beta: 2.0,
        }
    }

    /// Stage-two defaults (DCT blocks, tighter matching on the pilot).
    pub fn final_stage(sigma: f64) -> Self {
        Bm3dProfile {
            match_threshold: 400.0,
            transform2d: Transform2d::Dct,
            ..Bm3dProfile::basic(sigma)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.block.is_power_of_two() || self.block < 4 {
            return Err(Error::parameter(format!(
                "block must be a power of two >= 4, got {}",
                self.block
            )));
        }
        if !self.group_max.is_power_of_two() {
            return Err(Error::parameter(format!(
                "group_max must be a power of two, got {}",
                self.group_max
            )));
        }
        if self.step == 0 {
            return Err(Error::parameter("step must be at least 1"));
        }
        if 2 * self.search_radius + 1 < self.block {
            return Err(Error::parameter(format!(
                "search window {} too narrow for block {}",
                2 * self.search_radius + 1,
                self.block
            )));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::parameter(format!(
                "sigma must be finite and positive, got {}",
                self.sigma
            )));
        }
        for (name, v) in [
            ("match_threshold", self.match_threshold),
            ("lambda3d", self.lambda3d),
            ("window_beta", self.window_beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::parameter(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ============================================================================
// Grouping
// ============================================================================

/// A matched group of blocks. Positions are `(row, col)` of each block's
/// top-left corner, sorted by ascending match distance with the reference
/// always first; ties break in row-major order.
#[derive(Clone, Debug)]
pub struct BlockGroup {
    pub reference: (usize, usize),
    pub positions: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    /// Stacked pixels, `count x block x block`, extracted from the image
    /// the matching ran on.
    pub volume: Array3<f64>,
}

impl BlockGroup {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same geometry, pixels re-extracted from another image of the same
    /// dimensions (stage two pairs pilot-matched positions with noisy data).
    pub fn with_volume_from(&self, img: &GrayImage) -> BlockGroup {
        let block = self.volume.dim().1;
        BlockGroup {
            reference: self.reference,
            positions: self.positions.clone(),
            distances: self.distances.clone(),
            volume: extract_volume(img, &self.positions, block),
        }
    }
}

fn extract_volume(img: &GrayImage, positions: &[(usize, usize)], block: usize) -> Array3<f64> {
    let mut volume = Array3::zeros((positions.len(), block, block));
    for (k, &(row, col)) in positions.iter().enumerate() {
        volume
            .slice_mut(s![k, .., ..])
            .assign(&img.plane().slice(s![row..row + block, col..col + block]));
    }
    volume
}

/// Mean squared difference per pixel between two blocks.
fn block_distance(img: &GrayImage, a: (usize, usize), b: (usize, usize), block: usize) -> f64 {
    let plane = img.plane();
    let mut sum = 0.0;
    for r in 0..block {
        for c in 0..block {
            let d = plane[[a.0 + r, a.1 + c]] - plane[[b.0 + r, b.1 + c]];
            sum += d * d;
        }
    }
    sum / (block * block) as f64
}

fn largest_power_of_two_at_most(n: usize) -> usize {
    debug_assert!(n >= 1);
    1 << n.ilog2()
}

/// Exhaustively scans the search window around `ref_pos` and assembles the
/// best-matching group. The reference block must lie fully inside the image.
pub fn block_match(img: &GrayImage, ref_pos: (usize, usize), profile: &Bm3dProfile) -> BlockGroup {
    let block = profile.block;
    let (h, w) = img.plane().dim();
    assert!(
        ref_pos.0 + block <= h && ref_pos.1 + block <= w,
        "reference block at {ref_pos:?} leaves the {w}x{h} image"
    );
    let radius = profile.search_radius;
    let row_lo = ref_pos.0.saturating_sub(radius);
    let row_hi = (ref_pos.0 + radius).min(h - block);
    let col_lo = ref_pos.1.saturating_sub(radius);
    let col_hi = (ref_pos.1 + radius).min(w - block);
    let cutoff = profile.match_threshold * profile.sigma * profile.sigma;

    let mut candidates: Vec<(f64, (usize, usize))> = Vec::new();
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let pos = (row, col);
            let dist = block_distance(img, ref_pos, pos, block);
            if dist <= cutoff || pos == ref_pos {
                candidates.push((dist, pos));
            }
        }
    }
    // Reference outranks any same-distance member so it is always member 0.
    candidates.sort_unstable_by(|a, b| {
        let key = |&(d, p): &(f64, (usize, usize))| (d, p != ref_pos, p);
        key(a).partial_cmp(&key(b)).unwrap()
    });
    let keep = largest_power_of_two_at_most(candidates.len().min(profile.group_max));
    candidates.truncate(keep);

    let positions: Vec<_> = candidates.iter().map(|&(_, p)| p).collect();
    let distances: Vec<_> = candidates.iter().map(|&(d, _)| d).collect();
    let volume = extract_volume(img, &positions, block);
    BlockGroup {
        reference: ref_pos,
        positions,
        distances,
        volume,
    }
}

// ============================================================================
// Collaborative filtering
// ============================================================================

fn forward_3d(volume: &mut Array3<f64>, transform: &BlockTransform) {
    let (count, block, _) = volume.dim();
    for k in 0..count {
        transform.forward(volume.slice_mut(s![k, .., ..]));
    }
    let mut line = vec![0.0; count];
    for r in 0..block {
        for c in 0..block {
            for k in 0..count {
                line[k] = volume[[k, r, c]];
            }
            haar_forward(&mut line);
            for k in 0..count {
                volume[[k, r, c]] = line[k];
            }
        }
    }
}

fn inverse_3d(volume: &mut Array3<f64>, transform: &BlockTransform) {
    let (count, block, _) = volume.dim();
    let mut line = vec![0.0; count];
    for r in 0..block {
        for c in 0..block {
            for k in 0..count {
                line[k] = volume[[k, r, c]];
            }
            haar_inverse(&mut line);
            for k in 0..count {
                volume[[k, r, c]] = line[k];
            }
        }
    }
    for k in 0..count {
        transform.inverse(volume.slice_mut(s![k, .., ..]));
    }
}

/// Hard-threshold collaborative filtering of one group. Returns the filtered
/// volume and the aggregation weight `1 / (sigma^2 * N_retained)` where
/// `N_retained` counts surviving nonzero coefficients (weight 1 when none
/// survive). The whole-volume DC coefficient is exempt from thresholding.
pub fn ht_filter_group(group: &BlockGroup, profile: &Bm3dProfile) -> Result<(Array3<f64>, f64)> {
    profile.validate()?;
    let transform = BlockTransform::new(profile.transform2d, profile.block)?;
    Ok(ht_filter_with(group, profile, &transform))
}

fn ht_filter_with(
    group: &BlockGroup,
    profile: &Bm3dProfile,
    transform: &BlockTransform,
) -> (Array3<f64>, f64) {
    let mut volume = group.volume.clone();
    forward_3d(&mut volume, transform);
    let threshold = profile.lambda3d * profile.sigma;
    let mut retained = 0usize;
    for (idx, coeff) in volume.iter_mut().enumerate() {
        // Index 0 is the volume DC: group-axis approx of the block DC.
        if idx != 0 && coeff.abs() < threshold {
            *coeff = 0.0;
        }
        if *coeff != 0.0 {
            retained += 1;
        }
    }
    inverse_3d(&mut volume, transform);
    let weight = if retained == 0 {
        1.0
    } else {
        1.0 / (profile.sigma * profile.sigma * retained as f64)
    };
    (volume, weight)
}

/// Empirical Wiener filtering of one noisy group steered by a pilot group
/// with identical geometry. Shrinkage per coefficient is
/// `w = P^2 / (P^2 + sigma^2)` with `P` the pilot spectrum; the weight is
/// `1 / (sigma^2 * sum(w^2))` (weight 1 when the pilot spectrum vanishes).
pub fn wiener_filter_group(
    noisy_group: &BlockGroup,
    pilot_group: &BlockGroup,
    profile: &Bm3dProfile,
) -> Result<(Array3<f64>, f64)> {
    profile.validate()?;
    if noisy_group.positions != pilot_group.positions {
        return Err(Error::parameter(
            "noisy and pilot groups must share positions",
        ));
    }
    let transform = BlockTransform::new(profile.transform2d, profile.block)?;
    Ok(wiener_filter_with(
        noisy_group,
        pilot_group,
        profile,
        &transform,
    ))
}

fn wiener_filter_with(
    noisy_group: &BlockGroup,
    pilot_group: &BlockGroup,
    profile: &Bm3dProfile,
    transform: &BlockTransform,
) -> (Array3<f64>, f64) {
    let mut noisy = noisy_group.volume.clone();
    let mut pilot = pilot_group.volume.clone();
    forward_3d(&mut noisy, transform);
    forward_3d(&mut pilot, transform);
    let sigma2 = profile.sigma * profile.sigma;
    let mut wsum = 0.0;
    for (coeff, &p) in noisy.iter_mut().zip(pilot.iter()) {
        let w = p * p / (p * p + sigma2);
        *coeff *= w;
        wsum += w * w;
    }
    inverse_3d(&mut noisy, transform);
    let weight = if wsum == 0.0 { 1.0 } else { 1.0 / (sigma2 * wsum) };
    (noisy, weight)
}

// ============================================================================
// Aggregation
// ============================================================================

/// One group's filtered output headed for the canvas.
#[derive(Clone, Debug)]
pub struct Contribution {
    pub positions: Vec<(usize, usize)>,
    pub volume: Array3<f64>,
    pub weight: f64,
}

/// Weighted-mean canvas accumulator. Contributions must be added in a fixed
/// order for bit-stable output; the orchestrators feed it row-major.
struct Accumulator {
    num: Array2<f64>,
    den: Array2<f64>,
    kaiser: Array2<f64>,
    block: usize,
}

impl Accumulator {
    fn new(width: usize, height: usize, profile: &Bm3dProfile) -> Self {
        Accumulator {
            num: Array2::zeros((height, width)),
            den: Array2::zeros((height, width)),
            kaiser: kaiser2d(profile.block, profile.window_beta),
            block: profile.block,
        }
    }

    fn add(&mut self, contribution: &Contribution) -> Result<()> {
        let (h, w) = self.num.dim();
        let b = self.block;
        for (k, &(row, col)) in contribution.positions.iter().enumerate() {
            if row + b > h || col + b > w {
                return Err(Error::parameter(format!(
                    "contribution block at ({row}, {col}) leaves the {w}x{h} canvas"
                )));
            }
            for r in 0..b {
                for c in 0..b {
                    let wk = contribution.weight * self.kaiser[[r, c]];
                    self.num[[row + r, col + c]] += wk * contribution.volume[[k, r, c]];
                    self.den[[row + r, col + c]] += wk;
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<GrayImage> {
        if self.den.iter().any(|&d| d <= 0.0) {
            return Err(Error::precondition(
                "aggregation left uncovered pixels (sweep did not tile the canvas)",
            ));
        }
        GrayImage::from_plane(&self.num / &self.den)
    }
}

/// Weighted-mean aggregation of a contribution list onto a fresh canvas.
pub fn aggregate(
    contributions: &[Contribution],
    width: usize,
    height: usize,
    profile: &Bm3dProfile,
) -> Result<GrayImage> {
    profile.validate()?;
    let mut acc = Accumulator::new(width, height, profile);
    for c in contributions {
        acc.add(c)?;
    }
    acc.finish()
}

// ============================================================================
// Orchestration
// ============================================================================

/// Reference coordinates along one axis: multiples of `step` plus a final
/// position flush with the far edge.
fn sweep_positions(dim: usize, block: usize, step: usize) -> Vec<usize> {
    let last = dim - block;
    let mut positions: Vec<usize> = (0..=last).step_by(step).collect();
    if *positions.last().unwrap() != last {
        positions.push(last);
    }
    positions
}

/// Per-group diagnostic record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupTrace {
    pub reference: (usize, usize),
    pub members: usize,
    /// Surviving nonzero count (hard threshold) or squared shrinkage mass
    /// (Wiener).
    pub statistic: f64,
    pub weight: f64,
}

enum Stage<'a> {
    HardThreshold,
    Wiener { noisy: &'a GrayImage },
}

/// Shared sweep driver: matches on `match_img`, filters per stage, and
/// aggregates in row-major reference order.
fn run_stage(
    match_img: &GrayImage,
    stage: &Stage,
    profile: &Bm3dProfile,
    mut trace: Option<&mut Vec<GroupTrace>>,
) -> Result<GrayImage> {
    profile.validate()?;
    let (h, w) = match_img.plane().dim();
    if w < profile.block || h < profile.block {
        return Err(Error::precondition(format!(
            "image {w}x{h} smaller than the {} block",
            profile.block
        )));
    }
    if let Stage::Wiener { noisy } = stage {
        ensure_same_shape((match_img.width(), match_img.height()), (noisy.width(), noisy.height()))?;
    }
    let transform = BlockTransform::new(profile.transform2d, profile.block)?;
    let rows = sweep_positions(h, profile.block, profile.step);
    let cols = sweep_positions(w, profile.block, profile.step);

    let mut acc = Accumulator::new(w, h, profile);
    for band in rows.chunks(ROW_BAND) {
        let band_results: Vec<Vec<(Contribution, GroupTrace)>> = band
            .par_iter()
            .map(|&row| {
                cols.iter()
                    .map(|&col| {
                        let group = block_match(match_img, (row, col), profile);
                        let (volume, weight, statistic) = match stage {
                            Stage::HardThreshold => {
                                let (v, weight) = ht_filter_with(&group, profile, &transform);
                                let retained = if weight == 1.0 {
                                    0.0
                                } else {
                                    1.0 / (weight * profile.sigma * profile.sigma)
                                };
                                (v, weight, retained)
                            }
                            Stage::Wiener { noisy } => {
                                let noisy_group = group.with_volume_from(noisy);
                                let (v, weight) =
                                    wiener_filter_with(&noisy_group, &group, profile, &transform);
                                let wsum = if weight == 1.0 {
                                    0.0
                                } else {
                                    1.0 / (weight * profile.sigma * profile.sigma)
                                };
                                (v, weight, wsum)
                            }
                        };
                        let trace_rec = GroupTrace {
                            reference: (row, col),
                            members: group.len(),
                            statistic,
                            weight,
                        };
                        (
                            Contribution {
                                positions: group.positions,
                                volume,
                                weight,
                            },
                            trace_rec,
                        )
                    })
                    .collect()
            })
            .collect();
        for row_result in band_results {
            for (contribution, trace_rec) in row_result {
                acc.add(&contribution)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(trace_rec);
                }
            }
        }
    }
    acc.finish()
}

/// Stage-one estimate: group on the noisy image, hard-threshold filter.
pub fn bm3d_basic(noisy: &GrayImage, profile: &Bm3dProfile) -> Result<GrayImage> {
    run_stage(noisy, &Stage::HardThreshold, profile, None)
}

/// Stage-one estimate with per-group diagnostics.
pub fn bm3d_basic_traced(
    noisy: &GrayImage,
    profile: &Bm3dProfile,
) -> Result<(GrayImage, Vec<GroupTrace>)> {
    let mut trace = Vec::new();
    let out = run_stage(noisy, &Stage::HardThreshold, profile, Some(&mut trace))?;
    Ok((out, trace))
}

/// Stage-two estimate: group on the pilot, Wiener-shrink the noisy spectrum
/// against the pilot spectrum.
pub fn bm3d_final(noisy: &GrayImage, pilot: &GrayImage, profile: &Bm3dProfile) -> Result<GrayImage> {
    run_stage(pilot, &Stage::Wiener { noisy }, profile, None)
}

/// Stage-two estimate with per-group diagnostics.
pub fn bm3d_final_traced(
    noisy: &GrayImage,
    pilot: &GrayImage,
    profile: &Bm3dProfile,
) -> Result<(GrayImage, Vec<GroupTrace>)> {
    let mut trace = Vec::new();
    let out = run_stage(pilot, &Stage::Wiener { noisy }, profile, Some(&mut trace))?;
    Ok((out, trace))
}

// ============================================================================
// Tests
// ============================================================================
