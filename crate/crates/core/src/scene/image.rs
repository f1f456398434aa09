//! Pixel containers and their PNG encodings.
//!
//! Color images are 8-bit RGB PNGs. Depth maps are 16-bit grayscale PNGs
//! holding `depth * 1000` (millimetres for metric scenes), saturating at
//! `u16::MAX`. Scalar maps such as transmittance are 16-bit grayscale PNGs
//! scaled by 65535.

use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

/// Depth PNG scale: stored value = depth * DEPTH_PNG_SCALE.
pub const DEPTH_PNG_SCALE: f32 = 1000.0;

/// An sRGB image with channel values in [0, 1], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
}

impl ViewImage {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        let fill = fill.map(clamp01);
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    /// Builds an image from row-major pixels, clamping every channel to [0, 1].
    /// Non-finite values map to 0.
    pub fn from_pixels(width: usize, height: usize, mut pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::arg(format!(
                "image buffer has {} pixels, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        for p in &mut pixels {
            *p = p.map(clamp01);
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).map(clamp01));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: [f32; 3]) {
        self.pixels[y * self.width + x] = value.map(clamp01);
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path.as_ref())?.to_rgb8()))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// The image as it reads back after an 8-bit PNG round trip.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }

    fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Self {
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| p.0.map(|c| c as f32 / 255.0))
            .collect();
        Self {
            width: w as usize,
            height: h as usize,
            pixels,
        }
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let mut buf = ImageBuffer::new(self.width as u32, self.height as u32);
        for (dst, src) in buf.pixels_mut().zip(&self.pixels) {
            *dst = Rgb(src.map(quantize_u8));
        }
        buf
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    /// Raw 8-bit quantized bytes; used for content hashing.
    pub fn quantized_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(quantize_u8))
            .collect()
    }
}

/// A dense single-channel float map (alpha, transmittance, intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ScalarMap {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::arg(format!(
                "map has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Saves values in [0, 1] as 16-bit grayscale scaled by 65535.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.values
                .iter()
                .map(|&v| (clamp01(v) * 65535.0).round() as u16)
                .collect(),
        )
        .expect("buffer size matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png16(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma16();
        let (w, h) = img.dimensions();
        let values = img.pixels().map(|p| p.0[0] as f32 / 65535.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            values,
        })
    }
}

/// Per-pixel depth in world units. Zero means "no coverage".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::arg(format!(
                "depth map has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::data(
                i,
                format!(
                    "depth value {} is not a finite non-negative number",
                    values[i]
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    fn to_luma16(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.values.iter().map(|&d| depth_to_u16(d)).collect(),
        )
        .expect("buffer size matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma16().save(path.as_ref())?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_luma16().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_luma16(
            &image::load_from_memory(bytes)?.to_luma16(),
        ))
    }

    /// The map as it reads back after a 16-bit PNG round trip.
    pub fn quantized(&self) -> Self {
        Self::from_luma16(&self.to_luma16())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_luma16(&image::open(path.as_ref())?.to_luma16()))
    }

    fn from_luma16(img: &ImageBuffer<Luma<u16>, Vec<u16>>) -> Self {
        let (w, h) = img.dimensions();
        let values = img
            .pixels()
            .map(|p| p.0[0] as f32 / DEPTH_PNG_SCALE)
            .collect();
        Self {
            width: w as usize,
            height: h as usize,
            values,
        }
    }
}

fn depth_to_u16(depth: f32) -> u16 {
    (depth * DEPTH_PNG_SCALE)
        .round()
        .clamp(0.0, u16::MAX as f32) as u16
}

pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn quantize_u8(v: f32) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}
