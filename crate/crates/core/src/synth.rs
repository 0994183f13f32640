//! Deterministic synthetic test scenes.
//!
//! The classic 512x512 test photographs are not redistributable, so the
//! toolkit bundles procedural stand-ins: a portrait-like scene mixing
//! smooth regions, sharp boundaries, and a textured patch; an all-over
//! texture field; a piecewise-constant plate for smooth-region checks; and
//! a monotone ramp for line-profile demos. Every scene is a pure function
//! of (scene, size), with no RNG state, so any two renders agree byte for
//! byte.
//!
//! Gray levels stay inside [25, 178]. With multiplicative noise the bright
//! tail is what clips at 255, so the cap keeps calibrated speckle
//! essentially clip-free (a 178-level pixel needs a +2.4 sigma multiplier
//! excursion at the strongest benchmarked level before clamping).

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Darkest gray level any scene emits.
pub const SCENE_MIN: f64 = 25.0;
/// Brightest gray level any scene emits; bounds clipping under speckle.
pub const SCENE_MAX: f64 = 178.0;

const MIN_SIZE: usize = 64;

/// Bundled scene catalogue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scene {
    /// Smooth plateaus, curved boundaries, and one strongly textured patch.
    Portrait,
    /// Multi-scale texture everywhere.
    Texture,
    /// Piecewise-constant plates with hard edges.
    Flat,
    /// Monotone diagonal gradient.
    Ramp,
}

impl Scene {
    pub const ALL: [Scene; 4] = [Scene::Portrait, Scene::Texture, Scene::Flat, Scene::Ramp];

    pub fn name(self) -> &'static str {
        match self {
            Scene::Portrait => "portrait",
            Scene::Texture => "texture",
            Scene::Flat => "flat",
            Scene::Ramp => "ramp",
        }
    }
}

impl FromStr for Scene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scene::ALL
            .into_iter()
            .find(|scene| scene.name() == s)
            .ok_or_else(|| {
                Error::parameter(format!(
                    "unknown scene '{s}' (expected portrait, texture, flat, or ramp)"
                ))
            })
    }
}

/// Axis-aligned crop window in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        img.crop(self.x, self.y, self.width, self.height)
    }
}

/// The textured patch of the portrait scene, scaled to the render size.
/// Benchmarks default their local-metrics window to this region.
pub fn texture_crop(size: usize) -> CropRect {
    CropRect {
        x: size * 3 / 16,
        y: size * 3 / 16,
        width: size * 5 / 16,
        height: size * 5 / 16,
    }
}

/// Renders a scene at `size x size`; at least 64 pixels per side so the
/// pyramid and block sweeps stay well-posed.
pub fn render(scene: Scene, size: usize) -> Result<GrayImage> {
    if size < MIN_SIZE {
        return Err(Error::parameter(format!(
            "scene size must be at least {MIN_SIZE}, got {size}"
        )));
    }
    let value = |x: usize, y: usize| {
        let tx = x as f64 / size as f64;
        let ty = y as f64 / size as f64;
        match scene {
            Scene::Portrait => portrait_value(tx, ty, x, y, size),
            Scene::Texture => texture_value(x, y, size),
            Scene::Flat => flat_value(tx, ty),
            Scene::Ramp => 30.0 + 140.0 * (0.75 * tx + 0.25 * ty),
        }
        .clamp(SCENE_MIN, SCENE_MAX)
    };
    GrayImage::from_fn(size, size, value)
}

// ============================================================================
// Scene fields
// ============================================================================

fn portrait_value(tx: f64, ty: f64, x: usize, y: usize, size: usize) -> f64 {
    use std::f64::consts::TAU;
    // Slowly varying illumination base.
    let mut v = 104.0
        + 28.0 * (TAU * (0.45 * tx + 0.21)).sin() * (TAU * (0.35 * ty - 0.07)).cos()
        + 14.0 * (TAU * 0.3 * (tx + ty)).cos();
    // Bright oval plateau, soft boundary.
    let oval = ((tx - 0.62) / 0.30).powi(2) + ((ty - 0.60) / 0.36).powi(2);
    v += 34.0 * soft_step(1.0 - oval, 0.12);
    // Dark cap across the top, soft boundary.
    let cap = ((tx - 0.30) / 0.42).powi(2) + ((ty - 0.10) / 0.34).powi(2);
    v -= 40.0 * soft_step(1.0 - cap, 0.15);
    // Textured patch (hat-feather stand-in) with feathered margins.
    let win = box_window(tx, 0.1875, 0.5, 0.035) * box_window(ty, 0.1875, 0.5, 0.035);
    if win > 0.0 {
        let cell_a = (size / 32).max(2) as f64;
        let cell_b = (size / 64).max(2) as f64;
        let t = 15.0 * value_noise(x as f64, y as f64, cell_a, 11)
            + 9.0 * value_noise(x as f64, y as f64, cell_b, 12);
        v += win * t;
    }
    // Faint grain everywhere so no region is analytically flat.
    v += 4.0 * value_noise(x as f64, y as f64, (size / 16).max(2) as f64, 13);
    // Hard-edged diagonal stripes in the lower-right corner.
    if tx + ty > 1.45 {
        let band = ((tx - ty) * 7.0).rem_euclid(1.0);
        v += if band < 0.5 { 16.0 } else { -16.0 };
    }
    v
}

fn texture_value(x: usize, y: usize, size: usize) -> f64 {
    let xf = x as f64;
    let yf = y as f64;
    102.0
        + 33.0 * value_noise(xf, yf, (size / 8).max(2) as f64, 21)
        + 20.0 * value_noise(xf, yf, (size / 16).max(2) as f64, 22)
        + 12.0 * value_noise(xf, yf, (size / 32).max(2) as f64, 23)
}

fn flat_value(tx: f64, ty: f64) -> f64 {
    // Later plates overwrite earlier ones; all boundaries are hard. The
    // plate levels sit in a moderate band around the background so
    // multiplicative noise stays close to homoscedastic across plates.
    let mut v = 95.0;
    if (0.08..0.46).contains(&tx) && (0.08..0.46).contains(&ty) {
        v = 115.0;
    }
    if (0.54..0.92).contains(&tx) && (0.12..0.50).contains(&ty) {
        v = 79.0;
    }
    if ((tx - 0.30).powi(2) + (ty - 0.72).powi(2)).sqrt() < 0.17 {
        v = 127.0;
    }
    if (0.55..0.95).contains(&tx) && (0.62..0.92).contains(&ty) {
        v = 103.0;
    }
    v
}

// ============================================================================
// Coordinate-hash value noise
// ============================================================================

/// SplitMix-style avalanche of a lattice coordinate; uniform in [0, 1).
fn hash2(x: i64, y: i64, salt: u64) -> f64 {
    let mut v = (x as u64)
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((y as u64).wrapping_mul(0xc2b2ae3d27d4eb4f))
        .wrapping_add(salt.wrapping_mul(0xd6e8feb86659fd93));
    v ^= v >> 27;
    v = v.wrapping_mul(0x94d049bb133111eb);
    v ^= v >> 31;
    (v >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise over a square lattice of the given cell size, with
/// smoothstep-eased interpolation; range [-1, 1].
fn value_noise(x: f64, y: f64, cell: f64, salt: u64) -> f64 {
    let gx = (x / cell).floor();
    let gy = (y / cell).floor();
    let fx = smooth(x / cell - gx);
    let fy = smooth(y / cell - gy);
    let (gx, gy) = (gx as i64, gy as i64);
    let v00 = hash2(gx, gy, salt);
    let v10 = hash2(gx + 1, gy, salt);
    let v01 = hash2(gx, gy + 1, salt);
    let v11 = hash2(gx + 1, gy + 1, salt);
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    2.0 * (top + (bottom - top) * fy) - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// 0 outside, 1 inside, linear ramp of the given width at the boundary of
/// the implicit region `field >= 0`.
fn soft_step(field: f64, width: f64) -> f64 {
    (field / width).clamp(0.0, 1.0)
}

/// 0 outside [lo, hi], 1 well inside, linear margins of the given width.
fn box_window(t: f64, lo: f64, hi: f64, margin: f64) -> f64 {
    soft_step(t - lo, margin) * soft_step(hi - t, margin)
}

// ============================================================================
// Tests
// ============================================================================
