//! The tunable surface shared by `denoise` and `bench`.
//!
//! Every key here can appear in a configuration file or a `--set` pair;
//! anything not set falls back to the library defaults. The keys:
//!
//! | key                     | meaning                                        |
//! |-------------------------|------------------------------------------------|
//! | sigma                   | `auto` or a fixed noise std-dev in gray levels |
//! | levels                  | pyramid detail layers (2..6)                   |
//! | filter                  | pyramid prototype: `maxflat7` or `spline5`     |
//! | boundary                | pyramid extension: `symmetric` or `periodic`   |
//! | k                       | per-layer threshold factors, coarse to fine    |
//! | gains                   | per-layer fusion gains, coarse to fine         |
//! | final_mode              | `fused-pilot` or `full-on-fused`               |
//! | block                   | block side length                              |
//! | step                    | reference-block stride                         |
//! | search_radius           | half-width of the matching window              |
//! | group_max               | group size cap                                 |
//! | match_threshold_basic   | stage-one match cutoff factor                  |
//! | match_threshold_final   | final-stage match cutoff factor                |
//! | lambda3d                | stage-one hard-threshold multiplier            |
//! | window_beta             | Kaiser aggregation window shape                |

use std::fmt::Write as _;
use std::str::FromStr;

use despeckle_core::bm3d::{bm3d_basic, bm3d_final, Bm3dProfile};
use despeckle_core::image::GrayImage;
use despeckle_core::mlfe::{auto_sigma, mlfe_bm3d, FinalStageMode, MlfeConfig, SigmaSource};
use despeckle_core::nsp::{threshold_denoise, BoundaryMode, NspConfig, PyramidFilter, ThresholdPolicy};
use despeckle_core::{Error, Result};

use crate::config::KeyValues;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseParams {
    pub pyramid: NspConfig,
    pub threshold: ThresholdPolicy,
    pub gains: Vec<f64>,
    pub sigma_source: SigmaSource,
    pub final_mode: FinalStageMode,
    pub block: usize,
    pub step: usize,
    pub search_radius: usize,
    pub group_max: usize,
    pub match_threshold_basic: f64,
    pub match_threshold_final: f64,
    pub lambda3d: f64,
    pub window_beta: f64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        let basic = Bm3dProfile::basic(1.0);
        let final_stage = Bm3dProfile::final_stage(1.0);
        let mlfe = MlfeConfig::default();
        DenoiseParams {
            pyramid: mlfe.pyramid,
            threshold: mlfe.threshold,
            gains: mlfe.gains,
            sigma_source: SigmaSource::Auto,
            final_mode: FinalStageMode::WienerWithFusedPilot,
            block: basic.block,
            step: basic.step,
            search_radius: basic.search_radius,
            group_max: basic.group_max,
            match_threshold_basic: basic.match_threshold,
            match_threshold_final: final_stage.match_threshold,
            lambda3d: basic.lambda3d,
            window_beta: basic.window_beta,
        }
    }
}

impl DenoiseParams {
    /// Consumes every recognized key from `kv`; unrecognized keys stay put
    /// for the caller's `finish` check.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut p = DenoiseParams::default();
        if let Some(v) = kv.take("sigma") {
            p.sigma_source = parse_sigma(&v)?;
        }
        if let Some(v) = kv.take_usize("levels")? {
            p.pyramid.levels = v;
            // Default threshold factors and gains track the layer count:
            // factor 3 everywhere with 4 on the noise-dominated finest
            // layer; gain 2 on the middle layers.
            p.threshold = default_threshold(v);
            p.gains = default_gains(v);
        }
        if let Some(v) = kv.take("filter") {
            p.pyramid.filter = match v.as_str() {
                "maxflat7" => PyramidFilter::Maxflat7,
                "spline5" => PyramidFilter::Spline5,
                _ => {
                    return Err(Error::parameter(format!(
                        "filter: expected maxflat7 or spline5, got '{v}'"
                    )))
                }
            };
        }
        if let Some(v) = kv.take("boundary") {
            p.pyramid.boundary = match v.as_str() {
                "symmetric" => BoundaryMode::Symmetric,
                "periodic" => BoundaryMode::Periodic,
                _ => {
                    return Err(Error::parameter(format!(
                        "boundary: expected symmetric or periodic, got '{v}'"
                    )))
                }
            };
        }
        if let Some(v) = kv.take_f64_list("k")? {
            p.threshold = ThresholdPolicy { k: v };
        }
        if let Some(v) = kv.take_f64_list("gains")? {
            p.gains = v;
        }
        if let Some(v) = kv.take("final_mode") {
            p.final_mode = match v.as_str() {
                "fused-pilot" => FinalStageMode::WienerWithFusedPilot,
                "full-on-fused" => FinalStageMode::FullBm3dOnFused,
                _ => {
                    return Err(Error::parameter(format!(
                        "final_mode: expected fused-pilot or full-on-fused, got '{v}'"
                    )))
                }
            };
        }
        if let Some(v) = kv.take_usize("block")? {
            p.block = v;
        }
        if let Some(v) = kv.take_usize("step")? {
            p.step = v;
        }
        if let Some(v) = kv.take_usize("search_radius")? {
            p.search_radius = v;
        }
        if let Some(v) = kv.take_usize("group_max")? {
            p.group_max = v;
        }
        if let Some(v) = kv.take_f64("match_threshold_basic")? {
            p.match_threshold_basic = v;
        }
        if let Some(v) = kv.take_f64("match_threshold_final")? {
            p.match_threshold_final = v;
        }
        if let Some(v) = kv.take_f64("lambda3d")? {
            p.lambda3d = v;
        }
        if let Some(v) = kv.take_f64("window_beta")? {
            p.window_beta = v;
        }
        Ok(p)
    }

    pub fn basic_profile(&self, sigma: f64) -> Bm3dProfile {
        Bm3dProfile {
            block: self.block,
            step: self.step,
            search_radius: self.search_radius,
            group_max: self.group_max,
            match_threshold: self.match_threshold_basic,
            lambda3d: self.lambda3d,
            window_beta: self.window_beta,
            ..Bm3dProfile::basic(sigma)
        }
    }

    pub fn final_profile(&self, sigma: f64) -> Bm3dProfile {
        Bm3dProfile {
            block: self.block,
            step: self.step,
            search_radius: self.search_radius,
            group_max: self.group_max,
            match_threshold: self.match_threshold_final,
            lambda3d: self.lambda3d,
            window_beta: self.window_beta,
            ..Bm3dProfile::final_stage(sigma)
        }
    }

    pub fn mlfe_config(&self) -> MlfeConfig {
        MlfeConfig {
            pyramid: self.pyramid,
            threshold: self.threshold.clone(),
            basic: self.basic_profile(1.0),
            final_stage: self.final_profile(1.0),
            gains: self.gains.clone(),
            sigma_source: self.sigma_source,
            final_mode: self.final_mode,
        }
    }

    /// The noise level a run on `img` would use.
    pub fn resolve_sigma(&self, img: &GrayImage) -> Result<f64> {
        match self.sigma_source {
            SigmaSource::Fixed(s) => Ok(s),
            SigmaSource::Auto => auto_sigma(img, &self.pyramid),
        }
    }

    /// Serializes the full parameter set as configuration lines that
    /// [`DenoiseParams::from_kv`] parses back to an equal value.
    pub fn to_config(&self) -> String {
        let mut s = String::new();
        match self.sigma_source {
            SigmaSource::Auto => s.push_str("sigma=auto\n"),
            SigmaSource::Fixed(v) => {
                writeln!(s, "sigma={v}").expect("writing to a string cannot fail")
            }
        }
        let filter = match self.pyramid.filter {
            PyramidFilter::Maxflat7 => "maxflat7",
            PyramidFilter::Spline5 => "spline5",
        };
        let boundary = match self.pyramid.boundary {
            BoundaryMode::Symmetric => "symmetric",
            BoundaryMode::Periodic => "periodic",
        };
        let final_mode = match self.final_mode {
            FinalStageMode::WienerWithFusedPilot => "fused-pilot",
            FinalStageMode::FullBm3dOnFused => "full-on-fused",
        };
        writeln!(
            s,
            "levels={}\nfilter={filter}\nboundary={boundary}\nk={}\ngains={}\n\
             final_mode={final_mode}\nblock={}\nstep={}\nsearch_radius={}\n\
             group_max={}\nmatch_threshold_basic={}\nmatch_threshold_final={}\n\
             lambda3d={}\nwindow_beta={}",
            self.pyramid.levels,
            join_numbers(&self.threshold.k),
            join_numbers(&self.gains),
            self.block,
            self.step,
            self.search_radius,
            self.group_max,
            self.match_threshold_basic,
            self.match_threshold_final,
            self.lambda3d,
            self.window_beta,
        )
        .expect("writing to a string cannot fail");
        s
    }
}

fn join_numbers(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

// ============================================================================
// Methods
// ============================================================================

/// The denoising approaches addressable by name from the command line and
/// from bench manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Pyramid hard-threshold preprocessing alone.
    NsctHt,
    /// Two-stage collaborative filtering: basic estimate, then Wiener
    /// refinement against it.
    Bm3d,
    /// The full fusion pipeline.
    MlfeBm3d,
    /// The input passed through untouched, as a baseline row.
    Noisy,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NsctHt, Method::Bm3d, Method::MlfeBm3d, Method::Noisy];

    pub fn name(self) -> &'static str {
        match self {
            Method::NsctHt => "nsct-ht",
            Method::Bm3d => "bm3d",
            Method::MlfeBm3d => "mlfe-bm3d",
            Method::Noisy => "noisy",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::parameter(format!(
                    "method: expected nsct-ht, bm3d, mlfe-bm3d, or noisy, got '{s}'"
                ))
            })
    }
}

/// Runs one method on `noisy` with an already resolved noise level.
/// `sigma` feeds the collaborative stages; the pyramid threshold estimates
/// its own per-layer levels and ignores it.
pub fn run_method(
    method: Method,
    noisy: &GrayImage,
    params: &DenoiseParams,
    sigma: f64,
) -> Result<GrayImage> {
    match method {
        Method::Noisy => Ok(noisy.clone()),
        Method::NsctHt => threshold_denoise(noisy, &params.threshold, &params.pyramid),
        Method::Bm3d => {
            let basic = bm3d_basic(noisy, &params.basic_profile(sigma))?;
            bm3d_final(noisy, &basic, &params.final_profile(sigma))
        }
        Method::MlfeBm3d => {
            let mut config = params.mlfe_config();
            config.sigma_source = SigmaSource::Fixed(sigma);
            mlfe_bm3d(noisy, &config)
        }
    }
}

fn parse_sigma(v: &str) -> Result<SigmaSource> {
    if v == "auto" {
        return Ok(SigmaSource::Auto);
    }
    let s: f64 = v
        .parse()
        .map_err(|_| Error::parameter(format!("sigma: expected auto or a number, got '{v}'")))?;
    Ok(SigmaSource::Fixed(s))
}

fn default_threshold(levels: usize) -> ThresholdPolicy {
    let mut k = vec![3.0; levels];
    if let Some(last) = k.last_mut() {
        *last = 4.0;
    }
    ThresholdPolicy { k }
}

fn default_gains(levels: usize) -> Vec<f64> {
    (0..levels)
        .map(|i| if i == 0 || i == levels - 1 { 1.0 } else { 2.0 })
        .collect()
}
