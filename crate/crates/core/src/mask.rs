//! Opacity masks and their morphological refinement.
//!
//! A mask bit is `true` where the view is under-observed and should be
//! generated. Structuring elements are full `n x n` squares whose origin sits
//! at offset `(n - 1) / 2` from the top-left corner, so even sizes place the
//! origin on the upper-left of the two central candidates. Dilation and
//! erosion are Minkowski operations:
//!
//! - `dilate(A, K)(p) = exists k in K: p - k in A`
//! - `erode(A, K)(p)  = for all k in K: p + k in A`
//!
//! Outside the image reads as `false` unless a [`Border`] says otherwise.

use std::collections::VecDeque;
use std::path::Path;

use image::{GrayImage, Luma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::ScalarMap;

/// Closing kernel size used by [`refine_mask`] defaults.
pub const DEFAULT_K_CLOSE: usize = 5;
/// Final dilation kernel size used by [`refine_mask`] defaults.
pub const DEFAULT_K_DILATE: usize = 20;
pub const DEFAULT_ETA_MASK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::arg(format!(
                "mask has {} bits, expected {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn not(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Writes a 1-bit grayscale PNG: 0 = keep, 1 (255 when expanded) = generate.
    pub fn write_png<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let png_err = |e: png::EncodingError| Error::format(format!("encoding mask PNG: {e}"));
        let mut writer = enc.write_header().map_err(png_err)?;
        let stride = self.width.div_ceil(8);
        let mut data = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    data[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&data).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_png(std::io::BufWriter::new(file))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_png(&mut buf)?;
        Ok(buf)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_gray(&image::load_from_memory(bytes)?.to_luma8()))
    }

    /// Reads any grayscale PNG; values >= 128 after 8-bit expansion are `true`.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        Ok(Self::from_gray(&img))
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            bits: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for (dst, &b) in img.pixels_mut().zip(&self.bits) {
            *dst = Luma([if b { 255 } else { 0 }]);
        }
        img
    }
}

/// `{ O < eta }`: pixels whose accumulated opacity stays below the threshold.
pub fn opacity_mask(transmittance: &ScalarMap, eta_mask: f64) -> Result<BinaryMask> {
    if !(eta_mask > 0.0 && eta_mask < 1.0) {
        return Err(Error::arg(format!(
            "eta_mask {eta_mask} must lie in (0, 1)"
        )));
    }
    let (w, h) = transmittance.dims();
    let bits = transmittance
        .values()
        .iter()
        .map(|&o| (o as f64) < eta_mask)
        .collect();
    Ok(BinaryMask {
        width: w,
        height: h,
        bits,
    })
}

/// Value read for pixels outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    #[default]
    False,
    True,
}

/// A square structuring element of side `size` with its origin at `anchor` (per axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SquareKernel {
    size: usize,
    anchor: usize,
}

impl SquareKernel {
    pub fn new(size: usize) -> Result<Self> {
        if size < 1 {
            return Err(Error::arg("kernel size must be at least 1"));
        }
        Ok(Self {
            size,
            anchor: (size - 1) / 2,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Point reflection `-K`. Identical to `self` for odd sizes.
    pub fn reflected(&self) -> Self {
        Self {
            size: self.size,
            anchor: self.size - 1 - self.anchor,
        }
    }

    /// Offsets covered along one axis: `-anchor ..= size - 1 - anchor`.
    fn offsets(&self) -> (isize, isize) {
        (
            -(self.anchor as isize),
            (self.size - 1 - self.anchor) as isize,
        )
    }
}

#[derive(Clone, Copy)]
enum Reduce {
    Any,
    All,
}

/// 1-D sliding window over `[i + lo, i + hi]` using prefix counts.
fn window_pass(line: &[bool], lo: isize, hi: isize, border: bool, op: Reduce, out: &mut [bool]) {
    let n = line.len() as isize;
    let mut prefix = Vec::with_capacity(line.len() + 1);
    prefix.push(0u32);
    for &b in line {
        prefix.push(prefix.last().unwrap() + b as u32);
    }
    let span = (hi - lo + 1) as u32;
    for (i, o) in out.iter_mut().enumerate() {
        let (a, b) = (i as isize + lo, i as isize + hi);
        let (ca, cb) = (a.clamp(0, n), (b + 1).clamp(0, n));
        let inside = prefix[cb as usize] - prefix[ca as usize];
        let outside = span - (cb - ca).max(0) as u32;
        let count = inside + if border { outside } else { 0 };
        *o = match op {
            Reduce::Any => count > 0,
            Reduce::All => count == span,
        };
    }
}

fn separable(m: &BinaryMask, lo: isize, hi: isize, border: Border, op: Reduce) -> BinaryMask {
    let (w, h) = m.dims();
    let border = border == Border::True;
    let mut rows = vec![false; w * h];
    rows.par_chunks_mut(w.max(1))
        .zip(m.bits.par_chunks(w.max(1)))
        .for_each(|(dst, src)| window_pass(src, lo, hi, border, op, dst));
    let cols: Vec<Vec<bool>> = (0..w)
        .into_par_iter()
        .map(|x| {
            let column: Vec<bool> = (0..h).map(|y| rows[y * w + x]).collect();
            let mut out = vec![false; h];
            window_pass(&column, lo, hi, border, op, &mut out);
            out
        })
        .collect();
    let mut bits = vec![false; w * h];
    for (x, col) in cols.iter().enumerate() {
        for (y, &b) in col.iter().enumerate() {
            bits[y * w + x] = b;
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits,
    }
}

pub fn dilate_with(m: &BinaryMask, k: SquareKernel, border: Border) -> BinaryMask {
    let (lo, hi) = k.offsets();
    // p - k for k in [lo, hi] spans [p - hi, p - lo]
    separable(m, -hi, -lo, border, Reduce::Any)
}

pub fn erode_with(m: &BinaryMask, k: SquareKernel, border: Border) -> BinaryMask {
    let (lo, hi) = k.offsets();
    separable(m, lo, hi, border, Reduce::All)
}

pub fn dilate(m: &BinaryMask, n: usize) -> Result<BinaryMask> {
    Ok(dilate_with(m, SquareKernel::new(n)?, Border::False))
}

pub fn erode(m: &BinaryMask, n: usize) -> Result<BinaryMask> {
    Ok(erode_with(m, SquareKernel::new(n)?, Border::False))
}

/// `erode(dilate(m))` with the same kernel.
pub fn close(m: &BinaryMask, n: usize) -> Result<BinaryMask> {
    erode(&dilate(m, n)?, n)
}

/// Sets every false region that is not 4-connected to the image border.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (w, h) = m.dims();
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed =
        |x: usize, y: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
            let i = y * w + x;
            if !m.bits[i] && !outside[i] {
                outside[i] = true;
                queue.push_back((x, y));
            }
        };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut queue);
        if h > 0 {
            seed(x, h - 1, &mut outside, &mut queue);
        }
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut queue);
        if w > 0 {
            seed(w - 1, y, &mut outside, &mut queue);
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        if x > 0 {
            seed(x - 1, y, &mut outside, &mut queue);
        }
        if x + 1 < w {
            seed(x + 1, y, &mut outside, &mut queue);
        }
        if y > 0 {
            seed(x, y - 1, &mut outside, &mut queue);
        }
        if y + 1 < h {
            seed(x, y + 1, &mut outside, &mut queue);
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits: m.bits.iter().zip(&outside).map(|(b, o)| *b || !o).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineParams {
    pub k_close: usize,
    pub k_dilate: usize,
    /// Reproduce `1 - close(M)` followed by dilation instead of close + fill.
    pub literal: bool,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            k_close: DEFAULT_K_CLOSE,
            k_dilate: DEFAULT_K_DILATE,
            literal: false,
        }
    }
}

/// Intermediate and final masks of the refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMask {
    pub closed: BinaryMask,
    pub refined: BinaryMask,
}

/// Closing, hole filling, then dilation. Returns both stages.
pub fn refine_mask_stages(m: &BinaryMask, params: RefineParams) -> Result<RefinedMask> {
    let closing = close(m, params.k_close)?;
    let closed = if params.literal {
        closing.not()
    } else {
        fill_holes(&closing)
    };
    let refined = dilate(&closed, params.k_dilate)?;
    Ok(RefinedMask { closed, refined })
}

pub fn refine_mask(m: &BinaryMask, params: RefineParams) -> Result<BinaryMask> {
    Ok(refine_mask_stages(m, params)?.refined)
}
