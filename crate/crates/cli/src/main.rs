//! `despeckle`: speckle-noise synthesis, three despeckling methods,
//! full-reference quality metrics and maps, line profiles, and a benchmark
//! grid over images x noise levels x methods.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 file I/O,
//! 2 invalid arguments or configuration, 3 violated algorithm
//! precondition. Every command is deterministic given its flags and seed;
//! `RAYON_NUM_THREADS` bounds the worker pool without changing any output
//! byte.

mod bench;
mod config;
mod params;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use despeckle_core::bm3d::{bm3d_basic_traced, bm3d_final_traced, GroupTrace};
use despeckle_core::image::{line_profile, read_image, write_image, write_rgb_png, GrayImage};
use despeckle_core::metrics::{psnr, quality_report, render_signed_map, ssim_map, MssimConvention, SsimMap};
use despeckle_core::mlfe::{mlfe_bm3d_stages, SigmaSource};
use despeckle_core::noise::{add_speckle, NoiseSpec};
use despeckle_core::nsp::{decompose, dump_stack};
use despeckle_core::synth::{render, Scene};
use despeckle_core::{Error, Result};

use crate::bench::{fmt_metric, BenchSpec, Convention};
use crate::config::KeyValues;
use crate::params::{run_method, DenoiseParams, Method};

#[derive(Parser)]
#[command(
    name = "despeckle",
    version,
    about = "Speckle-noise synthesis, despeckling, and benchmarking for grayscale images",
    after_help = "Exit codes: 0 success, 1 file I/O, 2 invalid arguments or configuration, \
                  3 violated algorithm precondition.\n\
                  RAYON_NUM_THREADS bounds the worker pool; outputs do not depend on it."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add calibrated multiplicative speckle noise to an image
    Noise(NoiseArgs),
    /// Run one despeckling method on an image
    Denoise(DenoiseArgs),
    /// Print full-reference quality metrics for an image pair
    Metrics(MetricsArgs),
    /// Write the structural-similarity map of an image pair
    SsimMap(SsimMapArgs),
    /// Render the signed difference of two similarity maps
    DiffMap(DiffMapArgs),
    /// Sample gray levels along a line segment into CSV
    Profile(ProfileArgs),
    /// Run an images x noise-levels x methods grid into CSV and markdown
    Bench(BenchArgs),
    /// Render a bundled synthetic test scene to a file
    Synth(SynthArgs),
}

#[derive(Args)]
struct NoiseArgs {
    /// Input image (PGM or PNG)
    #[arg(short, long)]
    input: PathBuf,
    /// Output path; format chosen by extension
    #[arg(short, long)]
    output: PathBuf,
    /// Noise variance
    #[arg(long)]
    sigma2: f64,
    /// RNG seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// How sigma2 is read: effective (pixel-domain variance) or normalized
    /// (scaled by the image's mean square over 255^2)
    #[arg(long, default_value = "effective")]
    convention: String,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Input image (PGM or PNG)
    #[arg(short, long)]
    input: PathBuf,
    /// Output path; format chosen by extension
    #[arg(short, long)]
    output: PathBuf,
    /// nsct-ht, bm3d, or mlfe-bm3d
    #[arg(short, long)]
    method: String,
    /// key=value parameter file
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Inline parameter override, repeatable; beats the file
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Noise level for the collaborative stages: auto or a standard
    /// deviation in gray levels; beats file and --set
    #[arg(long)]
    sigma: Option<String>,
    /// Directory for intermediate stage images plus the serialized
    /// parameter set
    #[arg(long, value_name = "DIR")]
    dump_stages: Option<PathBuf>,
    /// CSV path for the per-group trace (method bm3d only)
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Image under test
    test: PathBuf,
    /// Reference image
    reference: PathBuf,
    /// MSSIM reduction: mean-of-map or mean-of-squared-map
    #[arg(long, default_value = "mean-of-map")]
    convention: String,
}

#[derive(Args)]
struct SsimMapArgs {
    /// Image under test
    test: PathBuf,
    /// Reference image
    reference: PathBuf,
    /// Output path for the grayscale map ([-1, 1] carried to [0, 255])
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct DiffMapArgs {
    /// First similarity map, as written by ssim-map
    map_a: PathBuf,
    /// Second similarity map; the render shows first minus second
    map_b: PathBuf,
    /// Output PNG (red where the first map is better, blue where worse)
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Input image
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    x0: usize,
    #[arg(long)]
    y0: usize,
    #[arg(long)]
    x1: usize,
    #[arg(long)]
    y1: usize,
    /// Output CSV path
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Manifest file of key=value pairs
    #[arg(short, long)]
    manifest: PathBuf,
    /// Inline manifest override, repeatable; beats the file
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory receiving report.csv, report.md, and maps/
    #[arg(short, long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene name: portrait, texture, flat, or ramp
    scene: String,
    /// Square render size in pixels
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Output path; format chosen by extension
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Read { .. } | Error::Write { .. } | Error::Format { .. } => 1,
        Error::Parameter(_) | Error::DimensionMismatch { .. } => 2,
        Error::Precondition(_) => 3,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Noise(a) => cmd_noise(a).map(|()| ExitCode::SUCCESS),
        Command::Denoise(a) => cmd_denoise(a).map(|()| ExitCode::SUCCESS),
        Command::Metrics(a) => cmd_metrics(a).map(|()| ExitCode::SUCCESS),
        Command::SsimMap(a) => cmd_ssim_map(a).map(|()| ExitCode::SUCCESS),
        Command::DiffMap(a) => cmd_diff_map(a).map(|()| ExitCode::SUCCESS),
        Command::Profile(a) => cmd_profile(a).map(|()| ExitCode::SUCCESS),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a).map(|()| ExitCode::SUCCESS),
    }
}

// ============================================================================
// Commands
// ============================================================================

fn cmd_noise(args: NoiseArgs) -> Result<()> {
    let clean = read_image(&args.input)?;
    let spec = match Convention::parse(&args.convention)? {
        Convention::Effective => NoiseSpec::new(args.sigma2, args.seed)?,
        Convention::Normalized => {
            NoiseSpec::from_normalized_level(args.sigma2, &clean, args.seed)?
        }
    };
    let noisy = add_speckle(&clean, &spec)?;
    write_image(&noisy, &args.output)?;
    let realized = (noisy.plane() - clean.plane())
        .mapv(|d| d * d)
        .mean()
        .expect("images are never empty");
    println!("realized_variance={realized:.4}");
    println!("psnr_db={}", fmt_metric(psnr(&noisy, &clean)?));
    Ok(())
}

fn cmd_denoise(args: DenoiseArgs) -> Result<()> {
    let method: Method = args.method.parse()?;
    if method == Method::Noisy {
        return Err(Error::parameter(
            "denoise: expected nsct-ht, bm3d, or mlfe-bm3d; noisy is a bench baseline",
        ));
    }
    if args.trace.is_some() && method != Method::Bm3d {
        return Err(Error::parameter("--trace requires --method bm3d"));
    }
    let params = load_params(args.config.as_deref(), &args.set, args.sigma.as_deref())?;

    let noisy = read_image(&args.input)?;
    let sigma = params.resolve_sigma(&noisy)?;

    let start = Instant::now();
    let output = execute(
        method,
        &noisy,
        &params,
        sigma,
        args.dump_stages.as_deref(),
        args.trace.as_deref(),
    )?;
    let seconds = start.elapsed().as_secs_f64();
    write_image(&output, &args.output)?;
    println!("sigma={sigma:.4}");
    println!("seconds={seconds:.3}");
    Ok(())
}

/// Builds the parameter set with flag > --set > file precedence.
fn load_params(
    config: Option<&Path>,
    set: &[String],
    sigma: Option<&str>,
) -> Result<DenoiseParams> {
    let mut kv = match config {
        Some(path) => KeyValues::from_file(path)?,
        None => KeyValues::empty(),
    };
    kv.apply_set(set)?;
    if let Some(s) = sigma {
        kv.apply_set(&[format!("sigma={s}")])?;
    }
    let params = DenoiseParams::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(params)
}

/// Runs one method, threading through the optional stage dump and group
/// trace so nothing expensive runs twice.
fn execute(
    method: Method,
    noisy: &GrayImage,
    params: &DenoiseParams,
    sigma: f64,
    dump_dir: Option<&Path>,
    trace_path: Option<&Path>,
) -> Result<GrayImage> {
    match method {
        Method::MlfeBm3d if dump_dir.is_some() => {
            let dir = dump_dir.expect("guarded by the match arm");
            let mut config = params.mlfe_config();
            config.sigma_source = SigmaSource::Fixed(sigma);
            let stages = mlfe_bm3d_stages(noisy, &config)?;
            ensure_dir(dir)?;
            let mut manifest = format!("sigma={}\n", stages.sigma);
            for (name, img) in [
                ("thresholded", &stages.thresholded),
                ("basic-noisy", &stages.basic_noisy),
                ("basic-thresholded", &stages.basic_thresholded),
                ("fused", &stages.fused),
                ("result", &stages.result),
            ] {
                let file = format!("{name}.png");
                write_image(img, dir.join(&file))?;
                manifest.push_str(&format!("stage.{name}={file}\n"));
            }
            write_text(dir.join("stages.txt"), &manifest)?;
            write_text(dir.join("params.conf"), &params.to_config())?;
            Ok(stages.result)
        }
        Method::Bm3d if dump_dir.is_some() || trace_path.is_some() => {
            let (basic, trace_basic) = bm3d_basic_traced(noisy, &params.basic_profile(sigma))?;
            let (out, trace_final) =
                bm3d_final_traced(noisy, &basic, &params.final_profile(sigma))?;
            if let Some(path) = trace_path {
                write_trace(path, &trace_basic, &trace_final)?;
            }
            if let Some(dir) = dump_dir {
                ensure_dir(dir)?;
                write_image(&basic, dir.join("basic.png"))?;
                write_text(
                    dir.join("stages.txt"),
                    &format!("sigma={sigma}\nstage.basic=basic.png\n"),
                )?;
                write_text(dir.join("params.conf"), &params.to_config())?;
            }
            Ok(out)
        }
        Method::NsctHt if dump_dir.is_some() => {
            let dir = dump_dir.expect("guarded by the match arm");
            dump_stack(&decompose(noisy, &params.pyramid)?, &dir.join("pyramid"))?;
            write_text(dir.join("params.conf"), &params.to_config())?;
            run_method(method, noisy, params, sigma)
        }
        _ => run_method(method, noisy, params, sigma),
    }
}

fn write_trace(path: &Path, basic: &[GroupTrace], final_stage: &[GroupTrace]) -> Result<()> {
    let mut csv = String::from("stage,ref_x,ref_y,members,statistic,weight\n");
    for (stage, traces) in [("basic", basic), ("final", final_stage)] {
        for t in traces {
            csv.push_str(&format!(
                "{stage},{},{},{},{},{}\n",
                t.reference.0, t.reference.1, t.members, t.statistic, t.weight
            ));
        }
    }
    write_text(path.to_path_buf(), &csv)
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let convention = parse_mssim_convention(&args.convention)?;
    let test = read_image(&args.test)?;
    let reference = read_image(&args.reference)?;
    let q = quality_report(&test, &reference, convention)?;
    println!("snr_db,psnr_db,rmse,mssim");
    println!(
        "{},{},{},{}",
        fmt_metric(q.snr_db),
        fmt_metric(q.psnr_db),
        fmt_metric(q.rmse),
        fmt_metric(q.mssim),
    );
    Ok(())
}

fn parse_mssim_convention(s: &str) -> Result<MssimConvention> {
    match s {
        "mean-of-map" => Ok(MssimConvention::MeanOfMap),
        "mean-of-squared-map" => Ok(MssimConvention::MeanOfSquaredMap),
        _ => Err(Error::parameter(format!(
            "convention: expected mean-of-map or mean-of-squared-map, got '{s}'"
        ))),
    }
}

fn cmd_ssim_map(args: SsimMapArgs) -> Result<()> {
    let test = read_image(&args.test)?;
    let reference = read_image(&args.reference)?;
    write_image(&ssim_map(&test, &reference)?.to_gray(), &args.output)
}

fn cmd_diff_map(args: DiffMapArgs) -> Result<()> {
    let a = SsimMap::from_gray(&read_image(&args.map_a)?);
    let b = SsimMap::from_gray(&read_image(&args.map_b)?);
    let diff = a.diff(&b)?;
    write_rgb_png(&args.output, a.width(), a.height(), &render_signed_map(&diff))
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let img = read_image(&args.input)?;
    let samples = line_profile(&img, (args.x0, args.y0), (args.x1, args.y1))?;
    let mut csv = String::from("x,y,distance,value\n");
    for s in &samples {
        csv.push_str(&format!("{},{},{},{}\n", s.x, s.y, s.distance, s.value));
    }
    write_text(args.output, &csv)
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let mut kv = KeyValues::from_file(&args.manifest)?;
    kv.apply_set(&args.set)?;
    let spec = BenchSpec::from_kv(&mut kv)?;
    kv.finish()?;
    let outcome = bench::run(&spec, &args.out_dir)?;
    println!("rows={}", outcome.rows.len());
    println!("report={}", args.out_dir.join("report.csv").display());
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &outcome.failures {
            eprintln!(
                "failed: {} at sigma2 {} with {}: {}",
                f.image,
                f.level,
                f.method.name(),
                f.message,
            );
        }
        Ok(ExitCode::from(1))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let scene: Scene = args.scene.parse()?;
    write_image(&render(scene, args.size)?, &args.output)
}

// ============================================================================
// Small file helpers
// ============================================================================

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|source| Error::Write { path, source })
}
