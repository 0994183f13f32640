//! 8-bit grayscale image I/O and the floating-point plane type used by
//! every algorithm in the crate.
//!
//! Files are read by magic bytes (binary PGM "P5" or PNG) and written by
//! extension. Color PNGs are reduced to luma with ITU-R BT.601 weights;
//! 16-bit sources are rejected rather than silently truncated.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

// ITU-R BT.601 luma weights for RGB reduction.
const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

// ============================================================================
// Gray image plane
// ============================================================================

/// Grayscale image stored as an `f64` plane in row-major order.
///
/// Values are nominally in `[0, 255]` but intermediate results (pyramid
/// reconstructions, filter outputs) may leave that range; quantization back
/// to bytes happens only on write. All values are finite by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    plane: Array2<f64>,
}

impl GrayImage {
    /// Wraps an existing plane. Rejects empty shapes and non-finite values.
    pub fn from_plane(plane: Array2<f64>) -> Result<Self> {
        let (h, w) = plane.dim();
        if w == 0 || h == 0 {
            return Err(Error::parameter("image dimensions must be nonzero"));
        }
        if !plane.iter().all(|v| v.is_finite()) {
            return Err(Error::parameter("image contains non-finite values"));
        }
        Ok(GrayImage { plane })
    }

    /// Builds an image from row-major samples.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::parameter(format!(
                "expected {} samples for {}x{}, got {}",
                width * height,
                width,
                height,
                data.len()
            )));
        }
        let plane = Array2::from_shape_vec((height, width), data)
            .map_err(|e| Error::parameter(e.to_string()))?;
        GrayImage::from_plane(plane)
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let plane = Array2::from_shape_fn((height, width), |(y, x)| f(x, y));
        GrayImage::from_plane(plane)
    }

    /// Constant-valued image.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        GrayImage::from_plane(Array2::from_elem((height, width), value))
    }

    pub fn width(&self) -> usize {
        self.plane.ncols()
    }

    pub fn height(&self) -> usize {
        self.plane.nrows()
    }

    /// Sample at column `x`, row `y`.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.plane[[y, x]]
    }

    pub fn plane(&self) -> &Array2<f64> {
        &self.plane
    }

    pub fn into_plane(self) -> Array2<f64> {
        self.plane
    }

    /// Mean of the squared samples; zero only for the all-zero image.
    pub fn mean_square(&self) -> f64 {
        let n = self.plane.len() as f64;
        self.plane.iter().map(|v| v * v).sum::<f64>() / n
    }

    /// Axis-aligned crop with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::parameter("crop dimensions must be nonzero"));
        }
        if x + width > self.width() || y + height > self.height() {
            return Err(Error::parameter(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                width,
                height,
                x,
                y,
                self.width(),
                self.height()
            )));
        }
        let view = self
            .plane
            .slice(ndarray::s![y..y + height, x..x + width])
            .to_owned();
        GrayImage::from_plane(view)
    }

    /// Quantizes to bytes: clamp to `[0, 255]`, round half away from zero.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.plane.iter().map(|&v| quantize_u8(v)).collect()
    }
}

/// Clamp to `[0, 255]` then round half away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    let c = v.clamp(0.0, 255.0);
    // After the clamp the value is nonnegative, so half away from zero is
    // plain half up.
    (c + 0.5).floor() as u8
}

// ============================================================================
// Reading
// ============================================================================

/// Reads a binary PGM or an 8-bit PNG, detected by magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(b"P5") {
        decode_pgm(path, &bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(path, &bytes)
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            reason: "unrecognized image format (expected binary PGM or PNG)".into(),
        })
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 2; // past "P5"
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = pgm_token(path, bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(
            path,
            format!("PGM maxval {maxval} outside the supported 8-bit range"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(path, "missing whitespace before PGM raster")),
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, "PGM dimensions must be nonzero"));
    }
    let need = width * height;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format_err(path, "PGM raster shorter than header promises"))?;
    GrayImage::from_vec(width, height, raster.iter().map(|&b| b as f64).collect())
}

/// Parses one ASCII integer, skipping whitespace and `#` comment lines.
fn pgm_token(path: &Path, bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            _ => return Err(format_err(path, "malformed PGM header")),
        }
    }
    let mut value: usize = 0;
    while let Some(b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| format_err(path, "PGM header value overflows"))?;
        *pos += 1;
    }
    Ok(value)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    // Expand palettes and sub-byte gray depths to 8-bit; 16-bit stays 16-bit
    // so it can be rejected below instead of silently truncated.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(
            path,
            format!(
                "unsupported PNG bit depth {:?} (only 8-bit images are accepted)",
                info.bit_depth
            ),
        ));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let n = width * height;
    let data = &buf[..info.buffer_size()];
    let samples: Vec<f64> = match info.color_type {
        png::ColorType::Grayscale => data.iter().map(|&v| v as f64).collect(),
        png::ColorType::GrayscaleAlpha => {
            data.chunks_exact(2).map(|px| px[0] as f64).collect()
        }
        png::ColorType::Rgb => data.chunks_exact(3).map(luma601).collect(),
        png::ColorType::Rgba => data.chunks_exact(4).map(luma601).collect(),
        other => {
            return Err(format_err(
                path,
                format!("unsupported PNG color type {other:?}"),
            ))
        }
    };
    if samples.len() != n {
        return Err(format_err(path, "PNG payload size mismatch"));
    }
    GrayImage::from_vec(width, height, samples)
}

fn luma601(px: &[u8]) -> f64 {
    LUMA_R * px[0] as f64 + LUMA_G * px[1] as f64 + LUMA_B * px[2] as f64
}

// ============================================================================
// Writing
// ============================================================================

/// Writes the image as binary PGM or 8-bit grayscale PNG, by extension.
pub fn write_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pgm") => write_pgm(img, path),
        Some("png") => write_gray_png(img, path),
        _ => Err(format_err(
            path,
            "unsupported output extension (use .pgm or .png)",
        )),
    }
}

fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_bytes());
    fs::write(path, out).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_gray_png(img: &GrayImage, path: &Path) -> Result<()> {
    write_png_bytes(
        path,
        img.width(),
        img.height(),
        png::ColorType::Grayscale,
        &img.to_bytes(),
    )
}

/// Writes an 8-bit RGB PNG from interleaved `r,g,b` bytes.
pub fn write_rgb_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    rgb: &[u8],
) -> Result<()> {
    let path = path.as_ref();
    if rgb.len() != width * height * 3 {
        return Err(Error::parameter(format!(
            "expected {} RGB bytes for {}x{}, got {}",
            width * height * 3,
            width,
            height,
            rgb.len()
        )));
    }
    write_png_bytes(path, width, height, png::ColorType::Rgb, rgb)
}

fn write_png_bytes(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let io_err = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| format_err(path, e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(())
}

// ============================================================================
// Line profiles
// ============================================================================

/// One sample along a rasterized segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileSample {
    pub x: usize,
    pub y: usize,
    /// Euclidean distance from the segment start, in pixels.
    pub distance: f64,
    pub value: f64,
}

/// Intensity profile along the Bresenham rasterization of a segment,
/// endpoints inclusive.
pub fn line_profile(
    img: &GrayImage,
    start: (usize, usize),
    end: (usize, usize),
) -> Result<Vec<ProfileSample>> {
    for &(x, y) in [&start, &end] {
        if x >= img.width() || y >= img.height() {
            return Err(Error::parameter(format!(
                "profile endpoint ({x}, {y}) outside image {}x{}",
                img.width(),
                img.height()
            )));
        }
    }
    let (x0, y0) = (start.0 as i64, start.1 as i64);
    let (x1, y1) = (end.0 as i64, end.1 as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    let mut samples = Vec::new();
    loop {
        samples.push(ProfileSample {
            x: x as usize,
            y: y as usize,
            distance: (((x - x0).pow(2) + (y - y0).pow(2)) as f64).sqrt(),
            value: img.get(x as usize, y as usize),
        });
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    Ok(samples)
}

// ============================================================================
// Tests
// ============================================================================
