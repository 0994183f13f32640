//! Release gate: one test per shipped guarantee, numbered so the harness
//! output reads as a checklist. The expensive 512-pixel portrait run is
//! shared by the quality tests through a lazy, so the whole gate stays
//! well inside the five-minute budget it enforces. Run with `--nocapture`
//! to see the measured margins behind each verdict.
//!
//! The calibration test upgrades itself when the classic 512x512 gray
//! test photograph is available: drop it at `assets/lena_gray_512.png`
//! (or `.pgm`) in the repository root, or point `DESPECKLE_LENA` at a
//! copy, and the absolute operating point is checked against it. Without
//! it the test verifies the realized noise variance on the bundled
//! scenes instead.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use despeckle_core::bm3d::{
    block_match, bm3d_basic, bm3d_final, dct2d, dwt2d_bior15, haar1d, ht_filter_group, idct2d,
    idwt2d_bior15, ihaar1d, wiener_filter_group, BlockGroup, Bm3dProfile, Transform2d,
};
use despeckle_core::image::{read_image, GrayImage};
use despeckle_core::metrics::{mssim, psnr, rmse, MssimConvention};
use despeckle_core::mlfe::{
    enhance_fused, fuse_geometric, mlfe_bm3d, rescale_range, MlfeConfig, SigmaSource,
};
use despeckle_core::noise::{add_speckle, GaussianStream, NoiseSpec};
use despeckle_core::nsp::{decompose, reconstruct, threshold_denoise, NspConfig, ThresholdPolicy};
use despeckle_core::synth::{render, texture_crop, Scene};
use ndarray::{s, Array2, Array3};

// ============================================================================
// Helpers
// ============================================================================

fn mix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn random_image(seed: u64, width: usize, height: usize) -> GrayImage {
    let mut stream = GaussianStream::new(seed);
    let data = (0..width * height)
        .map(|_| (128.0 + 40.0 * stream.next_normal()).clamp(0.0, 255.0))
        .collect();
    GrayImage::from_vec(width, height, data).unwrap()
}

fn random_plane(stream: &mut GaussianStream, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * stream.next_normal())
}

fn bounds(plane: &Array2<f64>) -> (f64, f64) {
    plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn max_abs_diff2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn max_abs_diff3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The classic gray test photograph when the user has provided one.
fn drop_in_photograph() -> Option<GrayImage> {
    let mut candidates = Vec::new();
    if let Ok(p) = env::var("DESPECKLE_LENA") {
        candidates.push(PathBuf::from(p));
    }
    candidates.push(workspace_root().join("assets/lena_gray_512.png"));
    candidates.push(workspace_root().join("assets/lena_gray_512.pgm"));
    let path = candidates.into_iter().find(|p| p.is_file())?;
    let img = read_image(&path)
        .unwrap_or_else(|e| panic!("unreadable drop-in image {}: {e}", path.display()));
    assert_eq!(
        (img.width(), img.height()),
        (512, 512),
        "drop-in image {} must be 512x512",
        path.display()
    );
    Some(img)
}

/// The 512x512 portrait cell at the headline operating point, shared by the
/// quality tests. Stage timings cover only the plain two-stage run.
struct PortraitRun {
    clean: GrayImage,
    noisy: GrayImage,
    sigma: f64,
    bm3d: GrayImage,
    mlfe: GrayImage,
    bm3d_seconds: f64,
}

static PORTRAIT: OnceLock<PortraitRun> = OnceLock::new();

fn portrait_run() -> &'static PortraitRun {
    PORTRAIT.get_or_init(|| {
        let clean = render(Scene::Portrait, 512).unwrap();
        let spec = NoiseSpec::from_normalized_level(1300.0, &clean, 9).unwrap();
        let noisy = add_speckle(&clean, &spec).unwrap();
        let sigma = spec.sigma2_target.sqrt();
        let start = Instant::now();
        let basic = bm3d_basic(&noisy, &Bm3dProfile::basic(sigma)).unwrap();
        let bm3d = bm3d_final(&noisy, &basic, &Bm3dProfile::final_stage(sigma)).unwrap();
        let bm3d_seconds = start.elapsed().as_secs_f64();
        let config = MlfeConfig {
            sigma_source: SigmaSource::Fixed(sigma),
            ..MlfeConfig::default()
        };
        let mlfe = mlfe_bm3d(&noisy, &config).unwrap();
        PortraitRun {
            clean,
            noisy,
            sigma,
            bm3d,
            mlfe,
            bm3d_seconds,
        }
    })
}

// ============================================================================
// 1. Pyramid perfect reconstruction
// ============================================================================

#[test]
fn criterion_1_pyramid_round_trip_is_exact() {
    let cfg = NspConfig::default();
    let mut state = 0x7201u64;
    let mut dims = vec![(257usize, 129usize), (64, 64), (128, 128)];
    while dims.len() < 200 {
        let w = 49 + (mix(&mut state) % 209) as usize;
        let h = 49 + (mix(&mut state) % 81) as usize;
        dims.push((w, h));
    }
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, &(w, h)) in dims.iter().enumerate() {
        let img = random_image(5000 + i as u64, w, h);
        let stack = decompose(&img, &cfg).unwrap();
        let rec = reconstruct(&stack).unwrap();
        worst = worst.max(max_abs_diff2(img.plane(), rec.plane()));
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("round trip: worst |error| {worst:.3e} over 200 images in {elapsed:.2} s");
    assert!(worst < 1e-8, "worst round-trip error {worst:.3e}");
    assert!(elapsed < 5.0, "round-trip sweep took {elapsed:.2} s");
}

// ============================================================================
// 2. PSNR/RMSE formula identity
// ============================================================================

#[test]
fn criterion_2_psnr_and_rmse_agree_by_formula() {
    for trial in 0..50u64 {
        let a = random_image(100 + trial, 32, 32);
        let b = random_image(200 + trial, 32, 32);
        let r = rmse(&a, &b).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!(r > 0.0, "random pair {trial} collided");
        let formula = 20.0 * (255.0 / r).log10();
        assert!(
            (p - formula).abs() <= 1e-9,
            "trial {trial}: psnr {p} vs formula {formula}"
        );
    }
    // A PSNR/RMSE pair quoted to four decimals must stay formula-consistent
    // to better than a thousandth of a decibel.
    let formula = 20.0 * (255.0f64 / 18.7178).log10();
    assert!(
        (formula - 22.6857).abs() <= 1e-3,
        "quoted pair drifts: {formula:.6} vs 22.6857"
    );
    println!("formula identity holds; quoted pair consistent at {formula:.4} dB");
}

// ============================================================================
// 3. Noise calibration
// ============================================================================

#[test]
fn criterion_3_noise_calibration_hits_its_target() {
    if let Some(photo) = drop_in_photograph() {
        let spec = NoiseSpec::from_normalized_level(1300.0, &photo, 9).unwrap();
        let noisy = add_speckle(&photo, &spec).unwrap();
        let p = psnr(&noisy, &photo).unwrap();
        println!("drop-in photograph: noisy PSNR {p:.4} dB (window 22.69 +/- 0.10)");
        assert!(
            (p - 22.69).abs() <= 0.10,
            "noisy PSNR {p:.4} dB outside 22.69 +/- 0.10"
        );
        return;
    }
    // No drop-in photograph; verify the realized variance against the
    // calibration target on the bundled scenes.
    let mut worst_rel = 0.0f64;
    for (scene, level, seed) in [
        (Scene::Portrait, Some(1300.0), 9u64),
        (Scene::Flat, Some(650.0), 9),
        (Scene::Texture, None, 10),
    ] {
        let clean = render(scene, 512).unwrap();
        let spec = match level {
            Some(l) => NoiseSpec::from_normalized_level(l, &clean, seed).unwrap(),
            None => NoiseSpec::new(350.0, seed).unwrap(),
        };
        let noisy = add_speckle(&clean, &spec).unwrap();
        let realized = clean
            .plane()
            .iter()
            .zip(noisy.plane())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (512.0 * 512.0);
        let rel = (realized / spec.sigma2_target - 1.0).abs();
        worst_rel = worst_rel.max(rel);
        println!(
            "{}: realized variance {realized:.1} vs target {:.1} ({:.2}% off)",
            scene.name(),
            spec.sigma2_target,
            100.0 * rel
        );
        assert!(
            rel <= 0.02,
            "{}: realized variance {realized:.1} is {:.2}% from target {:.1}",
            scene.name(),
            100.0 * rel,
            spec.sigma2_target
        );
    }
    println!("worst calibration error {:.2}%", 100.0 * worst_rel);
}

// ============================================================================
// 4. Two-stage collaborative filtering quality
// ============================================================================

#[test]
fn criterion_4_two_stage_filtering_clears_31_db() {
    let run = portrait_run();
    let noisy_db = psnr(&run.noisy, &run.clean).unwrap();
    let bm3d_db = psnr(&run.bm3d, &run.clean).unwrap();
    println!(
        "portrait cell: sigma {:.2}, noisy {noisy_db:.2} dB, two-stage {bm3d_db:.2} dB in {:.1} s",
        run.sigma, run.bm3d_seconds
    );
    assert!(bm3d_db >= 31.0, "two-stage estimate at {bm3d_db:.2} dB");
    assert!(
        run.bm3d_seconds <= 300.0,
        "two-stage run took {:.1} s",
        run.bm3d_seconds
    );
}

// ============================================================================
// 5. Fusion improvement over the plain two-stage run
// ============================================================================

#[test]
fn criterion_5_fusion_beats_the_plain_two_stage() {
    let run = portrait_run();
    let bm3d_db = psnr(&run.bm3d, &run.clean).unwrap();
    let mlfe_db = psnr(&run.mlfe, &run.clean).unwrap();
    let gain = mlfe_db - bm3d_db;
    let crop = texture_crop(512);
    let clean_crop = crop.apply(&run.clean).unwrap();
    let plain_local = mssim(
        &crop.apply(&run.bm3d).unwrap(),
        &clean_crop,
        MssimConvention::default(),
    )
    .unwrap();
    let fused_local = mssim(
        &crop.apply(&run.mlfe).unwrap(),
        &clean_crop,
        MssimConvention::default(),
    )
    .unwrap();
    println!(
        "portrait cell: fusion {mlfe_db:.2} dB vs two-stage {bm3d_db:.2} dB ({gain:+.2} dB); \
         local MSSIM {fused_local:.4} vs {plain_local:.4}"
    );
    assert!(gain >= 0.2, "fusion gain {gain:+.3} dB is under +0.2");
    assert!(
        fused_local >= plain_local,
        "local MSSIM {fused_local:.4} fell below {plain_local:.4}"
    );
}

// ============================================================================
// 6. Smooth-region preservation
// ============================================================================

#[test]
fn criterion_6_smooth_regions_stay_within_a_third_db() {
    let clean = render(Scene::Flat, 512).unwrap();
    let spec = NoiseSpec::from_normalized_level(650.0, &clean, 9).unwrap();
    let noisy = add_speckle(&clean, &spec).unwrap();
    let sigma = spec.sigma2_target.sqrt();
    let basic = bm3d_basic(&noisy, &Bm3dProfile::basic(sigma)).unwrap();
    let plain = bm3d_final(&noisy, &basic, &Bm3dProfile::final_stage(sigma)).unwrap();
    let config = MlfeConfig {
        sigma_source: SigmaSource::Fixed(sigma),
        ..MlfeConfig::default()
    };
    let fused = mlfe_bm3d(&noisy, &config).unwrap();
    let plain_db = psnr(&plain, &clean).unwrap();
    let fused_db = psnr(&fused, &clean).unwrap();
    let delta = fused_db - plain_db;
    println!("flat cell: two-stage {plain_db:.2} dB, fusion {fused_db:.2} dB (delta {delta:+.3} dB)");
    assert!(delta.abs() <= 0.3, "smooth-region delta {delta:+.3} dB");
}

// ============================================================================
// 7. Kernel oracles
// ============================================================================

/// Straight-line exhaustive grouping with column-major distance sums,
/// deliberately not sharing the library's loops.
fn oracle_match(
    img: &GrayImage,
    ref_pos: (usize, usize),
    profile: &Bm3dProfile,
) -> Vec<(usize, usize)> {
    let plane = img.plane();
    let (h, w) = plane.dim();
    let block = profile.block;
    let cutoff = profile.match_threshold * profile.sigma * profile.sigma;
    let mut found: Vec<(f64, (usize, usize))> = Vec::new();
    let row_hi = (ref_pos.0 + profile.search_radius).min(h - block);
    let col_hi = (ref_pos.1 + profile.search_radius).min(w - block);
    for row in ref_pos.0.saturating_sub(profile.search_radius)..=row_hi {
        for col in ref_pos.1.saturating_sub(profile.search_radius)..=col_hi {
            let mut sum = 0.0;
            for c in 0..block {
                for r in 0..block {
                    let d = plane[[ref_pos.0 + r, ref_pos.1 + c]] - plane[[row + r, col + c]];
                    sum += d * d;
                }
            }
            let dist = sum / (block * block) as f64;
            if dist <= cutoff || (row, col) == ref_pos {
                found.push((dist, (row, col)));
            }
        }
    }
    found.sort_by(|a, b| {
        let key = |&(d, p): &(f64, (usize, usize))| (d, p != ref_pos, p);
        key(a).partial_cmp(&key(b)).unwrap()
    });
    let cap = found.len().min(profile.group_max);
    let mut keep = 1;
    while keep * 2 <= cap {
        keep *= 2;
    }
    found.truncate(keep);
    found.into_iter().map(|(_, p)| p).collect()
}

/// One analysis step of the periodized wavelet as an explicit circulant
/// matrix: approx rows on top, detail rows below.
fn analysis_matrix(size: usize) -> Array2<f64> {
    let scale = std::f64::consts::SQRT_2 / 256.0;
    let lo = [3.0, -3.0, -22.0, 22.0, 128.0, 128.0, 22.0, -22.0, -3.0, 3.0];
    let hi = [0.0, 0.0, 0.0, 0.0, -128.0, 128.0, 0.0, 0.0, 0.0, 0.0];
    let mut m = Array2::zeros((size, size));
    for i in 0..size / 2 {
        for k in 0..10 {
            let j = (2 * i + k) % size;
            m[[i, j]] += lo[k] * scale;
            m[[size / 2 + i, j]] += hi[k] * scale;
        }
    }
    m
}

/// Full-depth 2D wavelet built from per-level matrix sandwiches over the
/// shrinking top-left subsquare.
fn oracle_dwt(block: &Array2<f64>) -> Array2<f64> {
    let n = block.nrows();
    let mut out = block.clone();
    let mut size = n;
    while size >= 2 {
        let m = analysis_matrix(size);
        let sub = out.slice(s![..size, ..size]).to_owned();
        let rows = sub.dot(&m.t());
        let both = m.dot(&rows);
        out.slice_mut(s![..size, ..size]).assign(&both);
        size /= 2;
    }
    out
}

fn spectrum2d(block: &Array2<f64>, kind: Transform2d) -> Array2<f64> {
    match kind {
        Transform2d::Dct => dct2d(block).unwrap(),
        Transform2d::Bior15 => dwt2d_bior15(block).unwrap(),
    }
}

fn spectrum2d_inverse(coeffs: &Array2<f64>, kind: Transform2d) -> Array2<f64> {
    match kind {
        Transform2d::Dct => idct2d(coeffs).unwrap(),
        Transform2d::Bior15 => idwt2d_bior15(coeffs).unwrap(),
    }
}

fn oracle_forward(volume: &Array3<f64>, kind: Transform2d) -> Array3<f64> {
    let (count, block, _) = volume.dim();
    let mut out = volume.clone();
    for k in 0..count {
        let spec = spectrum2d(&out.slice(s![k, .., ..]).to_owned(), kind);
        out.slice_mut(s![k, .., ..]).assign(&spec);
    }
    for r in 0..block {
        for c in 0..block {
            let line: Vec<f64> = (0..count).map(|k| out[[k, r, c]]).collect();
            let line = haar1d(&line).unwrap();
            for k in 0..count {
                out[[k, r, c]] = line[k];
            }
        }
    }
    out
}

fn oracle_inverse(volume: &Array3<f64>, kind: Transform2d) -> Array3<f64> {
    let (count, block, _) = volume.dim();
    let mut out = volume.clone();
    for r in 0..block {
        for c in 0..block {
            let line: Vec<f64> = (0..count).map(|k| out[[k, r, c]]).collect();
            let line = ihaar1d(&line).unwrap();
            for k in 0..count {
                out[[k, r, c]] = line[k];
            }
        }
    }
    for k in 0..count {
        let spec = spectrum2d_inverse(&out.slice(s![k, .., ..]).to_owned(), kind);
        out.slice_mut(s![k, .., ..]).assign(&spec);
    }
    out
}

/// Hard thresholding recomputed coefficient by coefficient: zero everything
/// under the cut except the volume DC, count survivors, derive the weight.
fn oracle_ht(group: &BlockGroup, profile: &Bm3dProfile) -> (Array3<f64>, f64) {
    let mut spectrum = oracle_forward(&group.volume, profile.transform2d);
    let cut = profile.lambda3d * profile.sigma;
    let mut retained = 0usize;
    for ((k, r, c), coeff) in spectrum.indexed_iter_mut() {
        let dc = k == 0 && r == 0 && c == 0;
        if !dc && coeff.abs() < cut {
            *coeff = 0.0;
        }
        if *coeff != 0.0 {
            retained += 1;
        }
    }
    let volume = oracle_inverse(&spectrum, profile.transform2d);
    let weight = if retained == 0 {
        1.0
    } else {
        1.0 / (profile.sigma * profile.sigma * retained as f64)
    };
    (volume, weight)
}

/// Wiener shrinkage recomputed coefficient by coefficient from the pilot
/// spectrum.
fn oracle_wiener(
    noisy: &BlockGroup,
    pilot: &BlockGroup,
    profile: &Bm3dProfile,
) -> (Array3<f64>, f64) {
    let mut spectrum = oracle_forward(&noisy.volume, profile.transform2d);
    let pilot_spec = oracle_forward(&pilot.volume, profile.transform2d);
    let sigma2 = profile.sigma * profile.sigma;
    let mut wsum = 0.0;
    for (coeff, &p) in spectrum.iter_mut().zip(pilot_spec.iter()) {
        let w = p * p / (p * p + sigma2);
        *coeff *= w;
        wsum += w * w;
    }
    let volume = oracle_inverse(&spectrum, profile.transform2d);
    let weight = if wsum == 0.0 { 1.0 } else { 1.0 / (sigma2 * wsum) };
    (volume, weight)
}

#[test]
fn criterion_7_kernels_match_reference_oracles() {
    // Grouping against the exhaustive scan.
    let mut state = 0xb10cu64;
    for trial in 0..50u64 {
        let img = random_image(9000 + trial, 32, 32);
        let block = if mix(&mut state) % 2 == 0 { 4 } else { 8 };
        let search_radius = [4, 9, 16][(mix(&mut state) % 3) as usize];
        let group_max = [8, 16][(mix(&mut state) % 2) as usize];
        let match_threshold = [50.0, 400.0, 2500.0][(mix(&mut state) % 3) as usize];
        let sigma = [5.0, 17.0][(mix(&mut state) % 2) as usize];
        let span = 32 - block + 1;
        let ref_pos = (
            (mix(&mut state) as usize) % span,
            (mix(&mut state) as usize) % span,
        );
        let profile = Bm3dProfile {
            block,
            search_radius,
            group_max,
            match_threshold,
            ..Bm3dProfile::basic(sigma)
        };
        let got = block_match(&img, ref_pos, &profile);
        let want = oracle_match(&img, ref_pos, &profile);
        assert_eq!(
            got.positions, want,
            "trial {trial}: grouping diverges at {ref_pos:?}"
        );
    }

    // Wavelet blocks against explicit per-level transform matrices.
    let mut stream = GaussianStream::new(31);
    let mut worst_fwd = 0.0f64;
    let mut worst_rt = 0.0f64;
    for &size in &[4usize, 8, 16] {
        for _ in 0..8 {
            let block = random_plane(&mut stream, size, size, 60.0);
            let got = dwt2d_bior15(&block).unwrap();
            let want = oracle_dwt(&block);
            worst_fwd = worst_fwd.max(max_abs_diff2(&got, &want));
            let back = idwt2d_bior15(&got).unwrap();
            worst_rt = worst_rt.max(max_abs_diff2(&back, &block));
        }
    }
    assert!(worst_fwd <= 1e-10, "wavelet vs matrix oracle: {worst_fwd:.3e}");
    assert!(worst_rt <= 1e-10, "wavelet round trip: {worst_rt:.3e}");

    // Collaborative filters against the per-coefficient reimplementation,
    // on genuinely matched groups over both block transforms.
    let img = random_image(777, 32, 32);
    let other = random_image(778, 32, 32);
    let mut worst_filter = 0.0f64;
    for &(kind, sigma) in &[(Transform2d::Bior15, 10.0), (Transform2d::Dct, 6.5)] {
        for &ref_pos in &[(0usize, 0usize), (11, 17), (24, 24)] {
            let profile = Bm3dProfile {
                transform2d: kind,
                search_radius: 10,
                ..Bm3dProfile::basic(sigma)
            };
            let group = block_match(&img, ref_pos, &profile);
            let (got_v, got_w) = ht_filter_group(&group, &profile).unwrap();
            let (want_v, want_w) = oracle_ht(&group, &profile);
            worst_filter = worst_filter.max(max_abs_diff3(&got_v, &want_v));
            assert!(
                (got_w - want_w).abs() <= 1e-12 * want_w,
                "hard-threshold weight {got_w} vs oracle {want_w}"
            );

            let pilot_group = block_match(&other, ref_pos, &profile);
            let noisy_group = pilot_group.with_volume_from(&img);
            let (got_v, got_w) = wiener_filter_group(&noisy_group, &pilot_group, &profile).unwrap();
            let (want_v, want_w) = oracle_wiener(&noisy_group, &pilot_group, &profile);
            worst_filter = worst_filter.max(max_abs_diff3(&got_v, &want_v));
            assert!(
                (got_w - want_w).abs() <= 1e-12 * want_w,
                "Wiener weight {got_w} vs oracle {want_w}"
            );
        }
    }
    // A singleton group exercises the length-1 group axis.
    let tight = Bm3dProfile {
        match_threshold: 1.0,
        ..Bm3dProfile::basic(1.0)
    };
    let group = block_match(&img, (3, 5), &tight);
    assert_eq!(group.positions.len(), 1, "tight cutoff should isolate the reference");
    let (got_v, got_w) = ht_filter_group(&group, &tight).unwrap();
    let (want_v, want_w) = oracle_ht(&group, &tight);
    worst_filter = worst_filter.max(max_abs_diff3(&got_v, &want_v));
    assert!((got_w - want_w).abs() <= 1e-12 * want_w);

    assert!(worst_filter <= 1e-9, "filter vs oracle: {worst_filter:.3e}");
    println!(
        "oracles agree: grouping exact over 50 trials, wavelet within {worst_fwd:.1e}, \
         filters within {worst_filter:.1e}"
    );
}

// ============================================================================
// 8. Fusion property suite
// ============================================================================

#[test]
fn criterion_8_fusion_rules_hold_on_random_coefficients() {
    let mut stream = GaussianStream::new(88);
    let mut state = 0xf05eu64;
    let total = 100_000usize;
    let mut first = Vec::with_capacity(total);
    let mut second = Vec::with_capacity(total);
    for i in 0..total {
        let scale_n = 10f64.powi((mix(&mut state) % 7) as i32 - 3);
        let scale_r = 10f64.powi((mix(&mut state) % 7) as i32 - 3);
        first.push(if i % 97 == 0 {
            0.0
        } else {
            scale_n * stream.next_normal()
        });
        second.push(if i % 89 == 0 {
            0.0
        } else {
            scale_r * stream.next_normal()
        });
    }
    let c_n = Array2::from_shape_vec((250, 400), first).unwrap();
    let c_r = Array2::from_shape_vec((250, 400), second).unwrap();
    let fused = fuse_geometric(&c_n, &c_r).unwrap();
    let swapped = fuse_geometric(&c_r, &c_n).unwrap();
    let mut zero_cases = 0usize;
    for (((&a, &b), &f), &g) in c_n.iter().zip(&c_r).zip(&fused).zip(&swapped) {
        assert_eq!(f.abs(), g.abs(), "magnitude is not symmetric at ({a}, {b})");
        if a == 0.0 || b == 0.0 {
            assert_eq!(f, 0.0, "zero input must fuse to zero, got {f} from ({a}, {b})");
            zero_cases += 1;
            continue;
        }
        assert!(f != 0.0, "nonzero inputs fused to zero at ({a}, {b})");
        assert_eq!(f > 0.0, a > 0.0, "sign must follow the first input at ({a}, {b})");
        let mag = (a * b).abs().sqrt();
        assert!(
            (f.abs() - mag).abs() <= 1e-12 * mag,
            "magnitude {f} vs geometric mean {mag}"
        );
        let (lo, hi) = (a.abs().min(b.abs()), a.abs().max(b.abs()));
        assert!(
            f.abs() >= lo * (1.0 - 1e-12) && f.abs() <= hi * (1.0 + 1e-12),
            "geometric mean {f} escaped [{lo}, {hi}]"
        );
    }
    assert!(zero_cases >= 2000, "zero paths undersampled: {zero_cases}");

    // Range re-adjustment lands exactly on the target extremes.
    let mut worst_end = 0.0f64;
    for trial in 0..20i32 {
        let scale = 10f64.powi(trial % 5 - 2);
        let plane_f = random_plane(&mut stream, 48, 48, scale);
        let plane_n = random_plane(&mut stream, 48, 48, 3.0 * scale);
        let out = rescale_range(&plane_f, &plane_n);
        let (lo_n, hi_n) = bounds(&plane_n);
        let (lo_o, hi_o) = bounds(&out);
        worst_end = worst_end.max((lo_o - lo_n).abs()).max((hi_o - hi_n).abs());
    }
    assert!(worst_end <= 1e-9, "range endpoints off by {worst_end:.3e}");
    let flat_plane = Array2::from_elem((9, 9), 4.25);
    let target = random_plane(&mut stream, 9, 9, 5.0);
    let (lo, hi) = bounds(&target);
    let out = rescale_range(&flat_plane, &target);
    assert!(
        out.iter().all(|&v| v == (lo + hi) / 2.0),
        "degenerate input must map to the range midpoint"
    );

    // Gains hit exactly the two middle layers and nothing else.
    let stack = decompose(&render(Scene::Texture, 96).unwrap(), &NspConfig::default()).unwrap();
    let boosted = enhance_fused(&stack, &[1.0, 2.0, 2.0, 1.0]).unwrap();
    for (idx, (orig, out)) in stack.layers().iter().zip(boosted.layers()).enumerate() {
        let gain = if idx == 1 || idx == 2 { 2.0 } else { 1.0 };
        assert!(
            orig.iter().zip(out).all(|(&a, &b)| b == gain * a),
            "layer {} is not scaled by exactly {gain}",
            idx + 1
        );
    }
    assert_eq!(
        boosted.lowpass(),
        stack.lowpass(),
        "lowpass must ride through unchanged"
    );
    println!(
        "fusion invariants hold over {total} pairs ({zero_cases} zero paths); \
         range endpoints within {worst_end:.1e}"
    );
}

// ============================================================================
// 9. Byte determinism across thread counts
// ============================================================================

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("failed to spawn the despeckle binary");
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_9_outputs_are_byte_stable_across_thread_counts() {
    // Library pipelines under explicit worker pools.
    let clean = render(Scene::Portrait, 96).unwrap();
    let spec = NoiseSpec::new(200.0, 5).unwrap();
    let noisy = add_speckle(&clean, &spec).unwrap();
    let run_all = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let pre =
                threshold_denoise(&noisy, &ThresholdPolicy::default(), &NspConfig::default())
                    .unwrap();
            let basic = bm3d_basic(&noisy, &Bm3dProfile::basic(14.0)).unwrap();
            let full = bm3d_final(&noisy, &basic, &Bm3dProfile::final_stage(14.0)).unwrap();
            let config = MlfeConfig {
                sigma_source: SigmaSource::Fixed(14.0),
                ..MlfeConfig::default()
            };
            let fused = mlfe_bm3d(&noisy, &config).unwrap();
            (pre, full, fused)
        })
    };
    let single = run_all(1);
    let wide = run_all(4);
    let rerun = run_all(4);
    assert!(
        single.0.plane() == wide.0.plane(),
        "pyramid thresholding varies with thread count"
    );
    assert!(
        single.1.plane() == wide.1.plane(),
        "two-stage filtering varies with thread count"
    );
    assert!(
        single.2.plane() == wide.2.plane(),
        "fusion pipeline varies with thread count"
    );
    assert!(wide.1.plane() == rerun.1.plane(), "two-stage rerun differs");
    assert!(wide.2.plane() == rerun.2.plane(), "fusion rerun differs");

    // The shipped binary under different thread-count environments.
    let bin = env!("CARGO_BIN_EXE_despeckle");
    let dir = env::temp_dir().join("despeckle-acceptance");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let path = |name: &str| dir.join(name).to_str().unwrap().to_owned();
    let clean_png = path("clean.png");
    run_ok(Command::new(bin).args(["synth", "flat", "--size", "64", "-o", &clean_png]));
    let noisy_a = path("noisy-a.png");
    let noisy_b = path("noisy-b.png");
    for out in [&noisy_a, &noisy_b] {
        run_ok(Command::new(bin).args([
            "noise", "-i", &clean_png, "-o", out, "--sigma2", "200", "--seed", "5",
        ]));
    }
    assert_eq!(
        fs::read(&noisy_a).unwrap(),
        fs::read(&noisy_b).unwrap(),
        "seeded noise is not byte stable"
    );
    for method in ["nsct-ht", "bm3d", "mlfe-bm3d"] {
        let narrow = path(&format!("{method}-t1.png"));
        let parallel = path(&format!("{method}-t4.png"));
        for (out, threads) in [(&narrow, "1"), (&parallel, "4")] {
            run_ok(
                Command::new(bin)
                    .args([
                        "denoise", "-i", &noisy_a, "-o", out, "-m", method, "--sigma", "14",
                    ])
                    .env("RAYON_NUM_THREADS", threads),
            );
        }
        assert_eq!(
            fs::read(&narrow).unwrap(),
            fs::read(&parallel).unwrap(),
            "{method} output varies with RAYON_NUM_THREADS"
        );
    }
    fs::remove_dir_all(&dir).ok();
    println!("library planes and binary artifacts identical across 1 and 4 threads");
}
