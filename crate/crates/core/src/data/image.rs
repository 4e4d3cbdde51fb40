use std::path::Path;

use image::DynamicImage;

use super::{DataError, Result};
use crate::tensor::Tensor;

/// 8-bit RGB pixels in row-major `H × W × 3` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelGrid {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(DataError::Validation(format!(
                "pixel buffer of {} bytes does not describe a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Solid-color grid.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Decodes a PNG or JPEG payload into 8-bit RGB. Grayscale is replicated into
/// all three channels and alpha is dropped.
pub fn decode_image(bytes: &[u8], name: &str) -> Result<PixelGrid> {
    let decoded = image::load_from_memory(bytes).map_err(|e| DataError::Decode {
        name: name.to_string(),
        reason: e.to_string(),
    })?;
    let rgb = match decoded {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => decoded.into_rgb8(),
        other => {
            return Err(DataError::UnsupportedBitDepth {
                name: name.to_string(),
                color: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    PixelGrid::new(w as usize, h as usize, rgb.into_raw())
}

pub fn load_image(path: &Path) -> Result<PixelGrid> {
    let bytes = std::fs::read(path).map_err(DataError::io(path))?;
    decode_image(&bytes, &path.display().to_string())
}

/// Bilinear resampling with half-pixel centers: output pixel `x` samples
/// source coordinate `(x + 0.5)·(in/out) − 0.5`, clamped to the image.
pub fn resize_bilinear(grid: &PixelGrid, out_width: usize, out_height: usize) -> Result<PixelGrid> {
    if out_width == 0 || out_height == 0 {
        return Err(DataError::Validation("resize target must be non-empty".into()));
    }
    if (grid.width, grid.height) == (out_width, out_height) {
        return Ok(grid.clone());
    }
    let xs = sample_positions(grid.width, out_width);
    let ys = sample_positions(grid.height, out_height);
    let mut data = Vec::with_capacity(out_width * out_height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| grid.data[(y * grid.width + x) * 3 + c] as f32;
                let top = lerp(at(x0, y0), at(x1, y0), fx);
                let bottom = lerp(at(x0, y1), at(x1, y1), fx);
                let v = lerp(top, bottom, fy);
                data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    PixelGrid::new(out_width, out_height, data)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Channels-first `[3, H, W]` tensor with every byte divided by 255.
pub fn normalize(grid: &PixelGrid) -> Tensor<f32> {
    let plane = grid.width * grid.height;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in grid.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, grid.height, grid.width], out).expect("grid dimensions are non-zero")
}
