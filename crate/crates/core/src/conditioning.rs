//! Edge-map conditioning extracted natively with the Canny detector.
//!
//! Pipeline: Rec. 601 luminance, separable Gaussian blur, Sobel gradients,
//! non-maximum suppression along four quantized directions, and double
//! threshold hysteresis with 8-connectivity. Gradient magnitudes are divided
//! by `4·√2`, the largest Sobel magnitude a `[0, 1]` image can produce, so
//! both thresholds live in `(0, 1]`.
//!
//! Out-of-range neighbours are read with edge replication. The outermost
//! one-pixel frame is never marked as an edge.

use std::collections::VecDeque;

use image::{DynamicImage, GenericImageView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const REC601: [f64; 3] = [0.299, 0.587, 0.114];
const MAX_SOBEL_MAGNITUDE: f64 = 4.0 * std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditioningError {
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("thresholds must satisfy 0 < low < high <= 1 (got low={low}, high={high})")]
    BadThresholds { low: f64, high: f64 },
    #[error("blur sigma must be finite and >= 0 (got {0})")]
    BadSigma(f64),
    #[error("could not encode edge map: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub blur_sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { low_threshold: 0.1, high_threshold: 0.2, blur_sigma: 1.4 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<(), ConditioningError> {
        let (low, high) = (self.low_threshold, self.high_threshold);
        if !(low > 0.0 && low < high && high <= 1.0) {
            return Err(ConditioningError::BadThresholds { low, high });
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(ConditioningError::BadSigma(self.blur_sigma));
        }
        Ok(())
    }
}

/// Row-major scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LumaGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "grid size mismatch");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    // Edge-replicated read.
    fn clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[cy * self.width + cx]
    }
}

/// Luminance in `[0, 1]` using Rec. 601 weights.
pub fn to_grayscale(image: &DynamicImage) -> LumaGrid {
    let (width, height) = image.dimensions();
    let (width, height) = (width as usize, height as usize);
    let data = match image {
        DynamicImage::ImageLuma8(gray) => gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(gray) => gray.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        _ => image
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                if r == g && g == b {
                    // The weights sum to 1 only up to rounding; keep gray exact.
                    r as f64 / 255.0
                } else {
                    REC601[0] * (r as f64 / 255.0) + REC601[1] * (g as f64 / 255.0) + REC601[2] * (b as f64 / 255.0)
                }
            })
            .collect(),
    };
    LumaGrid { width, height, data }
}

pub fn decode_grayscale(bytes: &[u8]) -> Result<LumaGrid, ConditioningError> {
    let image = image::load_from_memory(bytes).map_err(|e| ConditioningError::Decode(e.to_string()))?;
    Ok(to_grayscale(&image))
}

/// Binary edge map; `1` marks an edge pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl EdgeMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn is_edge(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    pub fn edge_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// True when every edge of `self` is also an edge of `other`.
    pub fn is_subset_of(&self, other: &EdgeMap) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixels.iter().zip(&other.pixels).all(|(a, b)| *a == 0 || *b != 0)
    }

    /// Encodes as a 1-bit grayscale PNG (black background, white edges).
    pub fn to_png(&self) -> Result<Vec<u8>, ConditioningError> {
        let encode_err = |e: png::EncodingError| ConditioningError::Encode(e.to_string());
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_edge(x, y) {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::One);
            let mut writer = encoder.write_header().map_err(encode_err)?;
            writer.write_image_data(&packed).map_err(encode_err)?;
            writer.finish().map_err(encode_err)?;
        }
        Ok(out)
    }

    /// Decodes any grayscale-convertible image; nonzero luminance is an edge.
    pub fn from_png(bytes: &[u8]) -> Result<Self, ConditioningError> {
        let image = image::load_from_memory(bytes).map_err(|e| ConditioningError::Decode(e.to_string()))?;
        let gray = image.to_luma8();
        Ok(Self {
            width: gray.width() as usize,
            height: gray.height() as usize,
            pixels: gray.pixels().map(|p| u8::from(p.0[0] != 0)).collect(),
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

pub fn gaussian_blur(grid: &LumaGrid, sigma: f64) -> LumaGrid {
    if sigma == 0.0 || grid.data.is_empty() {
        return grid.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let horizontal = LumaGrid::from_fn(grid.width, grid.height, |x, y| {
        kernel.iter().enumerate().map(|(k, w)| w * grid.clamped(x as isize + k as isize - radius, y as isize)).sum()
    });
    LumaGrid::from_fn(grid.width, grid.height, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * horizontal.clamped(x as isize, y as isize + k as isize - radius))
            .sum()
    })
}

/// Horizontal and vertical Sobel responses.
pub fn sobel(grid: &LumaGrid) -> (LumaGrid, LumaGrid) {
    let gx = LumaGrid::from_fn(grid.width, grid.height, |x, y| {
        let (x, y) = (x as isize, y as isize);
        (grid.clamped(x + 1, y - 1) + 2.0 * grid.clamped(x + 1, y) + grid.clamped(x + 1, y + 1))
            - (grid.clamped(x - 1, y - 1) + 2.0 * grid.clamped(x - 1, y) + grid.clamped(x - 1, y + 1))
    });
    let gy = LumaGrid::from_fn(grid.width, grid.height, |x, y| {
        let (x, y) = (x as isize, y as isize);
        (grid.clamped(x - 1, y + 1) + 2.0 * grid.clamped(x, y + 1) + grid.clamped(x + 1, y + 1))
            - (grid.clamped(x - 1, y - 1) + 2.0 * grid.clamped(x, y - 1) + grid.clamped(x + 1, y - 1))
    });
    (gx, gy)
}

fn non_maximum_suppression(magnitude: &LumaGrid, gx: &LumaGrid, gy: &LumaGrid) -> LumaGrid {
    let (w, h) = (magnitude.width, magnitude.height);
    let mut out = vec![0.0; w * h];
    if w < 3 || h < 3 {
        return LumaGrid::new(w, h, out);
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = magnitude.get(x, y);
            if m == 0.0 {
                continue;
            }
            let mut angle = gy.get(x, y).atan2(gx.get(x, y)).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Image y grows downward, so a 45° gradient points to (+1, +1).
            let ((ax, ay), (bx, by)) = if !(22.5..157.5).contains(&angle) {
                ((x - 1, y), (x + 1, y))
            } else if angle < 67.5 {
                ((x + 1, y + 1), (x - 1, y - 1))
            } else if angle < 112.5 {
                ((x, y - 1), (x, y + 1))
            } else {
                ((x - 1, y + 1), (x + 1, y - 1))
            };
            // Ties keep the pixel.
            if m >= magnitude.get(ax, ay) && m >= magnitude.get(bx, by) {
                out[y * w + x] = m;
            }
        }
    }
    LumaGrid::new(w, h, out)
}

fn hysteresis(thinned: &LumaGrid, low: f64, high: f64) -> EdgeMap {
    let (w, h) = (thinned.width, thinned.height);
    let mut pixels = vec![0u8; w * h];
    let mut queue = VecDeque::new();
    let interior = |x: usize, y: usize| x > 0 && y > 0 && x + 1 < w && y + 1 < h;
    for y in 0..h {
        for x in 0..w {
            if interior(x, y) && thinned.get(x, y) >= high {
                pixels[y * w + x] = 1;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if interior(nx, ny) && pixels[ny * w + nx] == 0 && thinned.get(nx, ny) >= low {
                    pixels[ny * w + nx] = 1;
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    EdgeMap { width: w, height: h, pixels }
}

/// Gradient magnitude normalized to `[0, 1]`, with the Sobel components.
pub fn gradient(grid: &LumaGrid, blur_sigma: f64) -> (LumaGrid, LumaGrid, LumaGrid) {
    let blurred = gaussian_blur(grid, blur_sigma);
    let (gx, gy) = sobel(&blurred);
    let magnitude = LumaGrid::new(
        grid.width,
        grid.height,
        gx.data.iter().zip(&gy.data).map(|(a, b)| a.hypot(*b) / MAX_SOBEL_MAGNITUDE).collect(),
    );
    (magnitude, gx, gy)
}

pub fn canny(grid: &LumaGrid, params: &CannyParams) -> Result<EdgeMap, ConditioningError> {
    params.validate()?;
    let (magnitude, gx, gy) = gradient(grid, params.blur_sigma);
    let thinned = non_maximum_suppression(&magnitude, &gx, &gy);
    Ok(hysteresis(&thinned, params.low_threshold, params.high_threshold))
}

pub fn canny_image(image: &DynamicImage, params: &CannyParams) -> Result<EdgeMap, ConditioningError> {
    canny(&to_grayscale(image), params)
}

pub fn canny_bytes(bytes: &[u8], params: &CannyParams) -> Result<EdgeMap, ConditioningError> {
    canny(&decode_grayscale(bytes)?, params)
}
