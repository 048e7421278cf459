//! Float RGB images and PNG IO.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use crate::conv::Tensor;
use crate::error::{Error, Result};

/// Row-major RGB image with components in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Domain(format!(
                "{width}×{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: (0..width * height).flat_map(|_| rgb).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        })
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::image(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::image("<memory>", e))?;
        Ok(out.into_inner())
    }

    /// Bilinear resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("buffer size matches");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Self {
            width,
            height,
            data: out.into_raw(),
        }
    }

    /// Scales so the longer side equals `long_side` (never upscales).
    pub fn limit_long_side(&self, long_side: usize) -> Self {
        let cur = self.width.max(self.height);
        if cur <= long_side {
            return self.clone();
        }
        let s = long_side as f64 / cur as f64;
        let w = ((self.width as f64 * s).round() as usize).max(1);
        let h = ((self.height as f64 * s).round() as usize).max(1);
        self.resized(w, h)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            h: self.height,
            w: self.width,
            c: 3,
            data: self.data.clone(),
        }
    }
}

pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
