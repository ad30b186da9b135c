//! Tissue segmentation and non-overlapping patch extraction.
//!
//! A slide raster is converted to HSV, its saturation channel is quantized to
//! 256 levels and split with Otsu's method. Glass background is near-white and
//! therefore low-saturation, so pixels strictly above the threshold are
//! tissue. Patches are cut on a fixed `p × p` grid anchored at the origin;
//! strips narrower than `p` at the right and bottom borders are dropped.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_MIN_COVERAGE: f64 = 0.5;
pub const DEFAULT_MAGNIFICATION: &str = "20x";

/// Row-major 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Solid-colour image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, pixels)
    }

    /// Decode a PNG or TIFF file into 8-bit RGB.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        let rgb = reader.decode()?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_rgb_png(path.as_ref(), self.width, self.height, &self.pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy the `size × size` block whose top-left corner is `(x, y)`.
    pub fn block(&self, x: usize, y: usize, size: usize) -> Result<Vec<u8>> {
        if x + size > self.width || y + size > self.height {
            return Err(Error::DimensionMismatch(format!(
                "block at ({x}, {y}) of size {size} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(size * size * 3);
        for row in y..y + size {
            let start = (row * self.width + x) * 3;
            out.extend_from_slice(&self.pixels[start..start + size * 3]);
        }
        Ok(out)
    }
}

pub(crate) fn save_rgb_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    image::save_buffer(
        path,
        pixels,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsv {
    /// Hue in degrees, `[0, 360)`.
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

/// Hexcone RGB to HSV. Achromatic pixels get hue 0.
pub fn rgb_pixel_to_hsv(rgb: [u8; 3]) -> Hsv {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max / 255.0;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let mut h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    if h < 0.0 {
        h += 360.0;
    }
    if h >= 360.0 {
        h -= 360.0;
    }
    Hsv { h, s, v }
}

/// Inverse hexcone conversion, rounding to the nearest 8-bit level.
pub fn hsv_to_rgb_pixel(hsv: Hsv) -> [u8; 3] {
    let c = hsv.v * hsv.s;
    let hp = hsv.h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = hsv.v - c;
    [r1, g1, b1].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

#[derive(Debug, Clone)]
pub struct HsvImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Hsv>,
}

pub fn rgb_to_hsv(image: &RasterImage) -> HsvImage {
    let pixels = image
        .pixels
        .chunks_exact(3)
        .map(|c| rgb_pixel_to_hsv([c[0], c[1], c[2]]))
        .collect();
    HsvImage {
        width: image.width,
        height: image.height,
        pixels,
    }
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Returns the level `t` maximizing the between-class variance of the split
/// `{0..=t} | {t+1..=255}`, smallest `t` on ties. A split with an empty side
/// has variance 0, so a single-spike histogram yields 0.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let level_sum: u64 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u64 * c)
        .sum();
    let n = total as f64;

    let mut best_level = 0u8;
    let mut best_var = f64::NEG_INFINITY;
    let mut count_below = 0u64;
    let mut sum_below = 0u64;
    for (t, &c) in histogram.iter().enumerate() {
        count_below += c;
        sum_below += t as u64 * c;
        let count_above = total - count_below;
        let var = if count_below == 0 || count_above == 0 {
            0.0
        } else {
            let w0 = count_below as f64 / n;
            let w1 = count_above as f64 / n;
            let mu0 = sum_below as f64 / count_below as f64;
            let mu1 = (level_sum - sum_below) as f64 / count_above as f64;
            w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
        };
        if var > best_var {
            best_var = var;
            best_level = t as u8;
        }
    }
    Ok(best_level)
}

/// Saturation quantized to `[0, 255]`.
#[inline]
pub fn saturation_level(s: f64) -> u8 {
    (s * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl TissueMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Tissue pixels inside the `size × size` window at `(x, y)`.
    pub fn count_window(&self, x: usize, y: usize, size: usize) -> usize {
        (y..y + size)
            .map(|row| {
                let start = row * self.width + x;
                self.bits[start..start + size].iter().filter(|&&b| b).count()
            })
            .sum()
    }

    pub fn tissue_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }
}

/// Result of tissue segmentation, with the threshold that produced it.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub threshold: u8,
    pub mask: TissueMask,
}

pub fn saturation_histogram(hsv: &HsvImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for px in &hsv.pixels {
        hist[saturation_level(px.s) as usize] += 1;
    }
    hist
}

/// Otsu on the quantized saturation channel; tissue = above the threshold.
///
/// A constant image has threshold 0, so it becomes all tissue unless its
/// saturation is 0 (pure grey or white), in which case it is all background.
pub fn segment_tissue_with_threshold(image: &RasterImage) -> Result<Segmentation> {
    let hsv = rgb_to_hsv(image);
    let threshold = otsu_threshold(&saturation_histogram(&hsv))?;
    let bits = hsv
        .pixels
        .iter()
        .map(|px| saturation_level(px.s) > threshold)
        .collect();
    Ok(Segmentation {
        threshold,
        mask: TissueMask::new(image.width, image.height, bits)?,
    })
}

pub fn segment_tissue(image: &RasterImage) -> Result<TissueMask> {
    segment_tissue_with_threshold(image).map(|s| s.mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub row: usize,
    pub col: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    pub size: usize,
    pub coverage: f64,
    /// `size × size × 3` RGB, row-major.
    pub pixels: Vec<u8>,
}

impl PatchRecord {
    pub fn entry(&self) -> PatchEntry {
        PatchEntry {
            row: self.row,
            col: self.col,
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            coverage: self.coverage,
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_rgb_png(path.as_ref(), self.size, self.size, &self.pixels)
    }
}

/// Grid cells with tissue coverage `>= min_coverage`, in row-major order.
pub fn extract_patches(
    image: &RasterImage,
    mask: &TissueMask,
    patch_size: usize,
    min_coverage: f64,
) -> Result<Vec<PatchRecord>> {
    if mask.width != image.width || mask.height != image.height {
        return Err(Error::DimensionMismatch(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width, mask.height, image.width, image.height
        )));
    }
    if patch_size == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let area = (patch_size * patch_size) as f64;

    let patches = (0..rows * cols)
        .into_par_iter()
        .filter_map(|cell| {
            let (row, col) = (cell / cols, cell % cols);
            let (x, y) = (col * patch_size, row * patch_size);
            let coverage = mask.count_window(x, y, patch_size) as f64 / area;
            (coverage >= min_coverage).then(|| PatchRecord {
                row,
                col,
                origin_x: x,
                origin_y: y,
                size: patch_size,
                coverage,
                pixels: image.block(x, y, patch_size).expect("cell inside image"),
            })
        })
        .collect();
    Ok(patches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub row: usize,
    pub col: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    pub coverage: f64,
}

/// Per-slide tiling manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub slide_id: String,
    /// Source raster, relative to the manifest's directory when not absolute.
    pub image: String,
    pub patch_size: usize,
    pub min_coverage: f64,
    pub magnification: String,
    pub otsu_threshold: u8,
    pub patches: Vec<PatchEntry>,
}

impl PatchManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Re-cut the listed patches from the source raster.
    pub fn patches_from(&self, image: &RasterImage) -> Result<Vec<PatchRecord>> {
        self.patches
            .iter()
            .map(|e| {
                Ok(PatchRecord {
                    row: e.row,
                    col: e.col,
                    origin_x: e.origin_x,
                    origin_y: e.origin_y,
                    size: self.patch_size,
                    coverage: e.coverage,
                    pixels: image.block(e.origin_x, e.origin_y, self.patch_size)?,
                })
            })
            .collect()
    }
}
