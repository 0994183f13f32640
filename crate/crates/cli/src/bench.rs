//! Benchmark grid: images x noise levels x methods, emitted as CSV and
//! a markdown report.
//!
//! Manifest keys beyond the shared denoising set:
//!
//! | key             | meaning                                              |
//! |-----------------|------------------------------------------------------|
//! | images          | comma list of bundled scene names or file paths      |
//! | noise_levels    | comma list of noise variances                        |
//! | methods         | comma list of method names (`noisy` adds a baseline) |
//! | seed            | master seed; per-cell seeds derive from it           |
//! | convention      | how levels are read: `effective` or `normalized`     |
//! | sigma           | collaborative-stage level: `calibrated`, `auto`, or a number |
//! | size            | render size for bundled scenes                       |
//! | write_ssim_maps | `true` to save a structural-similarity map per run   |
//! | local.<image>   | `x,y,w,h` crop adding a `local` metrics row          |
//!
//! The same noisy realization is shared by every method of one
//! (image, level) cell, so method columns are directly comparable. Cells
//! run on the worker pool; rows keep manifest order regardless of
//! completion order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use despeckle_core::image::{read_image, write_image, GrayImage};
use despeckle_core::metrics::{quality_report, ssim_map, MssimConvention, QualityReport};
use despeckle_core::noise::{add_speckle, NoiseSpec};
use despeckle_core::synth::{render, CropRect, Scene};
use despeckle_core::{Error, Result};
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::params::{run_method, DenoiseParams, Method};

pub const CSV_HEADER: &str = "image,sigma2,seed,method,region,snr_db,psnr_db,rmse,mssim,seconds";

const DEFAULT_SEED: u64 = 7;
const DEFAULT_SIZE: usize = 512;

/// How manifest noise levels map to a target variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    /// The level is the effective additive variance itself.
    Effective,
    /// The level is scaled by `mean(u^2) / 255^2` of the clean image, so
    /// one number means the same relative corruption on any scene.
    Normalized,
}

impl Convention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "effective" => Ok(Convention::Effective),
            "normalized" => Ok(Convention::Normalized),
            _ => Err(Error::parameter(format!(
                "convention: expected effective or normalized, got '{s}'"
            ))),
        }
    }
}

/// Where the collaborative stages get sigma for each cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaPolicy {
    /// Square root of the cell's target variance. The honest default: the
    /// synthesizer calibrates to that variance, so no estimation step is
    /// interposed.
    Calibrated,
    /// Estimate from the noisy image's finest pyramid layer.
    Auto,
    /// One fixed value for every cell.
    Fixed(f64),
}

impl SigmaPolicy {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "calibrated" => Ok(SigmaPolicy::Calibrated),
            "auto" => Ok(SigmaPolicy::Auto),
            _ => s.parse().map(SigmaPolicy::Fixed).map_err(|_| {
                Error::parameter(format!(
                    "sigma: expected calibrated, auto, or a number, got '{s}'"
                ))
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ImageSource {
    Scene(Scene),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct SourceImage {
    pub label: String,
    pub source: ImageSource,
    /// Optional crop adding a second metrics row for the cell.
    pub local: Option<CropRect>,
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub images: Vec<SourceImage>,
    pub levels: Vec<f64>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub convention: Convention,
    pub sigma: SigmaPolicy,
    pub size: usize,
    pub write_ssim_maps: bool,
    pub params: DenoiseParams,
}

impl BenchSpec {
    /// Builds a spec from manifest keys, consuming everything it
    /// recognizes. The caller finishes the `KeyValues` to reject strays.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        // Bench claims `sigma` before the shared parameter set sees it:
        // the manifest grammar adds `calibrated` on top of the denoise
        // command's `auto | number`.
        let sigma = match kv.take("sigma") {
            Some(v) => SigmaPolicy::parse(&v)?,
            None => SigmaPolicy::Calibrated,
        };
        let image_names = required(kv.take_str_list("images")?, "images")?;
        let levels = required(kv.take_f64_list("noise_levels")?, "noise_levels")?;
        let methods = required(kv.take_str_list("methods")?, "methods")?
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Method>>>()?;
        let seed = kv.take_u64("seed")?.unwrap_or(DEFAULT_SEED);
        let convention = match kv.take("convention") {
            Some(v) => Convention::parse(&v)?,
            None => Convention::Effective,
        };
        let size = kv.take_usize("size")?.unwrap_or(DEFAULT_SIZE);
        let write_ssim_maps = kv.take_bool("write_ssim_maps")?.unwrap_or(false);
        let locals = kv.take_prefixed("local.");
        let params = DenoiseParams::from_kv(kv)?;

        for level in &levels {
            if !level.is_finite() || *level <= 0.0 {
                return Err(Error::parameter(format!(
                    "noise_levels: levels must be finite and positive, got {level}"
                )));
            }
        }

        let mut images = Vec::with_capacity(image_names.len());
        for name in &image_names {
            let (label, source) = classify_image(name);
            if images.iter().any(|s: &SourceImage| s.label == label) {
                return Err(Error::parameter(format!(
                    "images: duplicate label '{label}'"
                )));
            }
            images.push(SourceImage {
                label,
                source,
                local: None,
            });
        }
        for (label, value) in locals {
            let rect = parse_crop(&value)?;
            let img = images
                .iter_mut()
                .find(|s| s.label == label)
                .ok_or_else(|| {
                    Error::parameter(format!(
                        "local.{label}: no image in the manifest has that label"
                    ))
                })?;
            img.local = Some(rect);
        }

        Ok(BenchSpec {
            images,
            levels,
            methods,
            seed,
            convention,
            sigma,
            size,
            write_ssim_maps,
            params,
        })
    }
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::parameter(format!("manifest is missing the '{key}' key")))
}

/// A bare scene name means the bundled scene; anything else is a path,
/// labeled by its file stem.
fn classify_image(name: &str) -> (String, ImageSource) {
    if let Ok(scene) = name.parse::<Scene>() {
        return (scene.name().to_string(), ImageSource::Scene(scene));
    }
    let path = PathBuf::from(name);
    let label = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
        .to_string();
    (label, ImageSource::File(path))
}

fn parse_crop(v: &str) -> Result<CropRect> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let nums: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
    match nums.as_deref() {
        Some([x, y, w, h]) => Ok(CropRect {
            x: *x,
            y: *y,
            width: *w,
            height: *h,
        }),
        _ => Err(Error::parameter(format!(
            "crop: expected x,y,width,height, got '{v}'"
        ))),
    }
}

/// Per-cell seed: the master seed is mixed with the image label and the
/// noise level, then finalized. Cells stay decorrelated while any one cell
/// is reproducible in isolation.
pub fn cell_seed(master: u64, label: &str, level: f64) -> u64 {
    splitmix64(master ^ fnv1a(label) ^ level.to_bits())
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ============================================================================
// Grid execution
// ============================================================================

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub image: String,
    pub level: f64,
    pub seed: u64,
    pub method: Method,
    pub region: &'static str,
    pub quality: QualityReport,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BenchFailure {
    pub image: String,
    pub level: f64,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub failures: Vec<BenchFailure>,
}

/// Runs the whole grid and writes `report.csv`, `report.md`, and (when
/// requested) `maps/` into `out_dir`. Cell failures are collected, not
/// fatal; the caller decides the exit status from `failures`.
pub fn run(spec: &BenchSpec, out_dir: &Path) -> Result<BenchOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let maps_dir = out_dir.join("maps");
    if spec.write_ssim_maps {
        std::fs::create_dir_all(&maps_dir).map_err(|source| Error::Write {
            path: maps_dir.clone(),
            source,
        })?;
    }

    // Unreadable inputs abort the run before any cell starts.
    let cleans: Vec<GrayImage> = spec
        .images
        .iter()
        .map(|img| match &img.source {
            ImageSource::Scene(scene) => render(*scene, spec.size),
            ImageSource::File(path) => read_image(path),
        })
        .collect::<Result<_>>()?;

    let grid: Vec<(usize, f64)> = spec
        .images
        .iter()
        .enumerate()
        .flat_map(|(i, _)| spec.levels.iter().map(move |&level| (i, level)))
        .collect();

    let cells: Vec<(Vec<BenchRow>, Vec<BenchFailure>)> = grid
        .par_iter()
        .map(|&(i, level)| {
            run_cell(
                &spec.images[i],
                &cleans[i],
                level,
                spec,
                spec.write_ssim_maps.then_some(maps_dir.as_path()),
            )
        })
        .collect();

    let mut outcome = BenchOutcome::default();
    for (rows, failures) in cells {
        outcome.rows.extend(rows);
        outcome.failures.extend(failures);
    }

    std::fs::write(out_dir.join("report.csv"), render_csv(&outcome.rows)).map_err(|source| {
        Error::Write {
            path: out_dir.join("report.csv"),
            source,
        }
    })?;
    std::fs::write(out_dir.join("report.md"), render_markdown(spec, &outcome)).map_err(
        |source| Error::Write {
            path: out_dir.join("report.md"),
            source,
        },
    )?;
    Ok(outcome)
}

/// One (image, level) cell: synthesize a single noisy realization, run
/// every method against it, measure whole-image and optional local-crop
/// quality.
fn run_cell(
    image: &SourceImage,
    clean: &GrayImage,
    level: f64,
    spec: &BenchSpec,
    maps_dir: Option<&Path>,
) -> (Vec<BenchRow>, Vec<BenchFailure>) {
    let seed = cell_seed(spec.seed, &image.label, level);
    let mut rows = Vec::new();
    let mut failures = Vec::new();

    let prepared = prepare_cell(clean, level, seed, spec);
    let (noisy, sigma) = match prepared {
        Ok(pair) => pair,
        Err(e) => {
            // Without a noisy input no method can run; flag each so the
            // report shows the full extent of the loss.
            for &method in &spec.methods {
                failures.push(BenchFailure {
                    image: image.label.clone(),
                    level,
                    method,
                    message: e.to_string(),
                });
            }
            return (rows, failures);
        }
    };

    for &method in &spec.methods {
        let start = Instant::now();
        let result = run_method(method, &noisy, &spec.params, sigma);
        let seconds = start.elapsed().as_secs_f64();
        let measured = result.and_then(|out| {
            measure(image, clean, &out, level, seed, method, seconds, maps_dir)
        });
        match measured {
            Ok(mut cell_rows) => rows.append(&mut cell_rows),
            Err(e) => failures.push(BenchFailure {
                image: image.label.clone(),
                level,
                method,
                message: e.to_string(),
            }),
        }
    }
    (rows, failures)
}

fn prepare_cell(
    clean: &GrayImage,
    level: f64,
    seed: u64,
    spec: &BenchSpec,
) -> Result<(GrayImage, f64)> {
    let noise = match spec.convention {
        Convention::Effective => NoiseSpec::new(level, seed)?,
        Convention::Normalized => NoiseSpec::from_normalized_level(level, clean, seed)?,
    };
    let noisy = add_speckle(clean, &noise)?;
    let sigma = match spec.sigma {
        SigmaPolicy::Calibrated => noise.sigma2_target.sqrt(),
        SigmaPolicy::Auto => despeckle_core::mlfe::auto_sigma(&noisy, &spec.params.pyramid)?,
        SigmaPolicy::Fixed(s) => s,
    };
    Ok((noisy, sigma))
}

#[allow(clippy::too_many_arguments)]
fn measure(
    image: &SourceImage,
    clean: &GrayImage,
    out: &GrayImage,
    level: f64,
    seed: u64,
    method: Method,
    seconds: f64,
    maps_dir: Option<&Path>,
) -> Result<Vec<BenchRow>> {
    let mut rows = vec![BenchRow {
        image: image.label.clone(),
        level,
        seed,
        method,
        region: "whole",
        quality: quality_report(out, clean, MssimConvention::default())?,
        seconds,
    }];
    if let Some(rect) = &image.local {
        rows.push(BenchRow {
            image: image.label.clone(),
            level,
            seed,
            method,
            region: "local",
            quality: quality_report(
                &rect.apply(out)?,
                &rect.apply(clean)?,
                MssimConvention::default(),
            )?,
            seconds,
        });
    }
    if let Some(dir) = maps_dir {
        let map = ssim_map(out, clean)?.to_gray();
        let file = format!("{}-{}-{}.png", image.label, level, method.name());
        write_image(&map, dir.join(file))?;
    }
    Ok(rows)
}

// ============================================================================
// Reports
// ============================================================================

/// Quotes a CSV field only when it needs it.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Fixed four-decimal metric formatting; infinities (identical images)
/// print as `inf` rather than a number.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn push_row(text: &mut String, row: &BenchRow) {
    let q = &row.quality;
    text.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{:.3}\n",
        csv_field(&row.image),
        row.level,
        row.seed,
        row.method.name(),
        row.region,
        fmt_metric(q.snr_db),
        fmt_metric(q.psnr_db),
        fmt_metric(q.rmse),
        fmt_metric(q.mssim),
        row.seconds,
    ));
}

pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for row in rows {
        push_row(&mut text, row);
    }
    text
}

fn render_markdown(spec: &BenchSpec, outcome: &BenchOutcome) -> String {
    let mut md = String::from("# Despeckling benchmark\n");
    md.push_str(&format!(
        "\nSeed {}; noise levels are {} variances; sigma policy {:?}.\n",
        spec.seed,
        match spec.convention {
            Convention::Effective => "effective",
            Convention::Normalized => "normalized",
        },
        spec.sigma,
    ));
    for image in &spec.images {
        let rows: Vec<&BenchRow> = outcome
            .rows
            .iter()
            .filter(|r| r.image == image.label)
            .collect();
        if rows.is_empty() {
            continue;
        }
        md.push_str(&format!("\n## {}\n\n", image.label));
        md.push_str("| sigma2 | method | region | SNR (dB) | PSNR (dB) | RMSE | MSSIM | seconds |\n");
        md.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in rows {
            let q = &r.quality;
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {:.3} |\n",
                r.level,
                r.method.name(),
                r.region,
                fmt_metric(q.snr_db),
                fmt_metric(q.psnr_db),
                fmt_metric(q.rmse),
                fmt_metric(q.mssim),
                r.seconds,
            ));
        }
    }
    if !outcome.failures.is_empty() {
        md.push_str("\n## Failures\n\n");
        for f in &outcome.failures {
            md.push_str(&format!(
                "- {} at sigma2 {} with {}: {}\n",
                f.image,
                f.level,
                f.method.name(),
                f.message,
            ));
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_from(pairs: &[&str]) -> Result<BenchSpec> {
        let mut kv = KeyValues::empty();
        kv.apply_set(&pairs.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        let spec = BenchSpec::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(spec)
    }

    #[test]
    fn manifest_parses_and_defaults_hold() {
        let spec = spec_from(&[
            "images=flat,ramp",
            "noise_levels=300,650",
            "methods=noisy,bm3d",
            "local.flat=4,4,24,24",
        ])
        .unwrap();
        assert_eq!(spec.images.len(), 2);
        assert_eq!(spec.images[0].label, "flat");
        assert!(spec.images[0].local.is_some());
        assert!(spec.images[1].local.is_none());
        assert_eq!(spec.levels, vec![300.0, 650.0]);
        assert_eq!(spec.methods, vec![Method::Noisy, Method::Bm3d]);
        assert_eq!(spec.seed, DEFAULT_SEED);
        assert_eq!(spec.convention, Convention::Effective);
        assert_eq!(spec.sigma, SigmaPolicy::Calibrated);
        assert_eq!(spec.size, DEFAULT_SIZE);
        assert!(!spec.write_ssim_maps);
    }

    #[test]
    fn missing_required_keys_are_rejected() {
        for pairs in [
            &["noise_levels=300", "methods=bm3d"][..],
            &["images=flat", "methods=bm3d"][..],
            &["images=flat", "noise_levels=300"][..],
        ] {
            assert!(spec_from(pairs).is_err(), "{pairs:?}");
        }
    }

    #[test]
    fn bad_local_label_and_crop_are_rejected() {
        assert!(spec_from(&[
            "images=flat",
            "noise_levels=300",
            "methods=noisy",
            "local.lena=0,0,8,8",
        ])
        .is_err());
        assert!(spec_from(&[
            "images=flat",
            "noise_levels=300",
            "methods=noisy",
            "local.flat=0,0,8",
        ])
        .is_err());
    }

    #[test]
    fn nonpositive_level_is_rejected() {
        assert!(spec_from(&["images=flat", "noise_levels=0", "methods=noisy"]).is_err());
    }

    #[test]
    fn cell_seed_separates_labels_and_levels() {
        let a = cell_seed(7, "flat", 300.0);
        assert_eq!(a, cell_seed(7, "flat", 300.0));
        assert_ne!(a, cell_seed(7, "ramp", 300.0));
        assert_ne!(a, cell_seed(7, "flat", 650.0));
        assert_ne!(a, cell_seed(8, "flat", 300.0));
    }

    #[test]
    fn csv_fields_escape_only_when_needed() {
        assert_eq!(csv_field("flat"), "flat");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn metric_formatting_uses_inf_sentinel() {
        assert_eq!(fmt_metric(f64::INFINITY), "inf");
        assert_eq!(fmt_metric(31.25), "31.2500");
    }

    #[test]
    fn small_grid_runs_and_reports() {
        let spec = spec_from(&[
            "images=ramp",
            "noise_levels=200",
            "methods=noisy,nsct-ht",
            "size=64",
            "seed=5",
            "local.ramp=8,8,32,32",
        ])
        .unwrap();
        let dir = std::env::temp_dir().join("despeckle-bench-grid");
        let outcome = run(&spec, &dir).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        // Two methods, each with a whole and a local row.
        assert_eq!(outcome.rows.len(), 4);
        assert_eq!(outcome.rows[0].method, Method::Noisy);
        assert_eq!(outcome.rows[0].region, "whole");
        assert_eq!(outcome.rows[1].region, "local");
        let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        let md = std::fs::read_to_string(dir.join("report.md")).unwrap();
        assert!(md.contains("## ramp"));
        assert!(!md.contains("## Failures"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn failed_cells_are_flagged_and_rows_preserved() {
        // Block 8 cannot fit a 4x4 crop, but that only breaks the local
        // row, not the whole grid... a too-small *image* is the clean way
        // to force a per-method failure: nsct-ht needs 49 pixels a side.
        let dir = std::env::temp_dir().join("despeckle-bench-fail");
        std::fs::create_dir_all(&dir).unwrap();
        let tiny = GrayImage::constant(32, 32, 90.0).unwrap();
        let path = dir.join("tiny.pgm");
        write_image(&tiny, &path).unwrap();
        let images_line = format!("images={}", path.display());
        let spec = spec_from(&[images_line.as_str(), "noise_levels=200", "methods=noisy,nsct-ht"])
            .unwrap();
        let outcome = run(&spec, &dir).unwrap();
        assert_eq!(outcome.rows.len(), 1, "noisy row survives");
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].method, Method::NsctHt);
        let md = std::fs::read_to_string(dir.join("report.md")).unwrap();
        assert!(md.contains("## Failures"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn reruns_are_byte_identical_outside_timings() {
        let spec = spec_from(&[
            "images=flat",
            "noise_levels=150",
            "methods=noisy",
            "size=64",
            "seed=9",
        ])
        .unwrap();
        let strip = |csv: &str| -> String {
            csv.lines()
                .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
                .collect::<Vec<_>>()
                .join("\n")
        };
        let d1 = std::env::temp_dir().join("despeckle-bench-det-1");
        let d2 = std::env::temp_dir().join("despeckle-bench-det-2");
        run(&spec, &d1).unwrap();
        run(&spec, &d2).unwrap();
        let a = strip(&std::fs::read_to_string(d1.join("report.csv")).unwrap());
        let b = strip(&std::fs::read_to_string(d2.join("report.csv")).unwrap());
        assert_eq!(a, b);
        std::fs::remove_dir_all(&d1).unwrap();
        std::fs::remove_dir_all(&d2).unwrap();
    }
}
