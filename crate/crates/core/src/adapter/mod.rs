//! Geometry-aware leveling adapter forward pass at configurable width.
//!
//! Condition image -> patch tokens -> cross-attention with geometry tokens ->
//! unpatched residual -> 512px projection -> four feature stages.

mod attention;
pub mod ops;
mod weights;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView3, Zip};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scene::{TokenGrid, ViewImage};

pub use self::attention::{attention_core, softmax_rows};
pub use self::weights::{
    read_archive, write_archive, AdapterConfig, AdapterWeights, ConvNextBlock, Stage,
    DEFAULT_CHANNELS, LAYER_SCALE_INIT, PYRAMID_MAGIC, TOY_CHANNELS, WEIGHTS_MAGIC,
};

pub const LATENT_SIZE: usize = 64;
pub const LATENT_CHANNELS: usize = 4;
pub const CONDITION_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;
/// Resolution at which condition images are patchified.
pub const PATCH_RESOLUTION: usize = 448;

/// Row `i` of the result is the flattened `(y, x, channel)` patch of token `i`.
fn patch_matrix(c: ArrayView3<f32>, p: usize) -> Result<Array2<f32>> {
    let (ch, h, w) = c.dim();
    if ch != 3 {
        return Err(Error::arg(format!(
            "condition must have 3 channels, got {ch}"
        )));
    }
    let (rows, cols) = TokenGrid::lattice_for(w, h, p)?;
    let mut m = Array2::zeros((rows * cols, p * p * 3));
    for r in 0..rows {
        for q in 0..cols {
            let mut row = m.row_mut(r * cols + q);
            for y in 0..p {
                for x in 0..p {
                    for k in 0..3 {
                        row[(y * p + x) * 3 + k] = c[[k, r * p + y, q * p + x]];
                    }
                }
            }
        }
    }
    Ok(m)
}

fn grid_from(rows: usize, cols: usize, m: Array2<f32>) -> Result<TokenGrid> {
    let d = m.ncols();
    let data = m.as_standard_layout().iter().copied().collect();
    TokenGrid::from_data(rows, cols, d, data)
}

fn grid_matrix(t: &TokenGrid) -> Array2<f32> {
    Array2::from_shape_vec((t.len(), t.dim()), t.data().to_vec()).expect("grid shape")
}

/// Linear embedding of every `p x p` patch of a 3-channel CHW tensor.
pub fn patchify_tensor(c: ArrayView3<f32>, w: &AdapterWeights) -> Result<TokenGrid> {
    let p = w.config.patch_size;
    let (_, h, wd) = c.dim();
    let (rows, cols) = TokenGrid::lattice_for(wd, h, p)?;
    let mut tokens = patch_matrix(c, p)?.dot(&w.patch_weight);
    tokens += &w.patch_bias;
    grid_from(rows, cols, tokens)
}

pub fn patchify(img: &ViewImage, w: &AdapterWeights) -> Result<TokenGrid> {
    patchify_tensor(ops::image_to_chw(img).view(), w)
}

/// Row-stochastic attention matrix `softmax(Q K^T / sqrt(d))` with Q and K from `l0`.
pub fn attention_weights(l0: &TokenGrid, w: &AdapterWeights) -> Result<Array2<f32>> {
    check_token_dim(l0, w, "l0")?;
    let l = grid_matrix(l0);
    let q = l.dot(&w.wq);
    let k = l.dot(&w.wk);
    let mut s = q.dot(&k.t());
    s /= (l0.dim() as f32).sqrt();
    softmax_rows(&mut s);
    Ok(s)
}

fn check_token_dim(t: &TokenGrid, w: &AdapterWeights, what: &str) -> Result<()> {
    if t.dim() != w.config.token_dim {
        return Err(Error::arg(format!(
            "{what} token dim {} does not match adapter dim {}",
            t.dim(),
            w.config.token_dim
        )));
    }
    Ok(())
}

/// Queries and keys come from the condition tokens, values from the geometry tokens.
pub fn cross_attention(l0: &TokenGrid, t_geo: &TokenGrid, w: &AdapterWeights) -> Result<TokenGrid> {
    check_token_dim(l0, w, "l0")?;
    check_token_dim(t_geo, w, "geometry")?;
    if l0.len() != t_geo.len() {
        return Err(Error::arg(format!(
            "values need one geometry token per condition token: {} vs {}",
            t_geo.len(),
            l0.len()
        )));
    }
    let out = attention_core(&grid_matrix(l0), &grid_matrix(t_geo), &w.wq, &w.wk, &w.wv);
    grid_from(l0.rows(), l0.cols(), out)
}

/// Scatters per-token patch vectors back into a CHW image of the lattice size.
fn unpatch_matrix(m: &Array2<f32>, rows: usize, cols: usize, p: usize) -> Array3<f32> {
    let mut out = Array3::zeros((3, rows * p, cols * p));
    for r in 0..rows {
        for q in 0..cols {
            let row = m.row(r * cols + q);
            for y in 0..p {
                for x in 0..p {
                    for k in 0..3 {
                        out[[k, r * p + y, q * p + x]] = row[(y * p + x) * 3 + k];
                    }
                }
            }
        }
    }
    out
}

/// `C_res` from attended tokens.
pub fn unpatch(attended: &TokenGrid, w: &AdapterWeights) -> Result<Array3<f32>> {
    check_token_dim(attended, w, "attended")?;
    let mut m = grid_matrix(attended).dot(&w.unpatch_weight);
    m += &w.unpatch_bias;
    Ok(unpatch_matrix(
        &m,
        attended.rows(),
        attended.cols(),
        w.config.patch_size,
    ))
}

/// `C + Unpatch(attended)`.
pub fn unpatch_and_fuse(
    attended: &TokenGrid,
    condition: ArrayView3<f32>,
    w: &AdapterWeights,
) -> Result<Array3<f32>> {
    let (_, h, wd) = condition.dim();
    let p = w.config.patch_size;
    if attended.patch_size() != p {
        return Err(Error::arg("token patch size differs from the adapter's"));
    }
    attended.check_image(wd, h)?;
    let res = unpatch(attended, w)?;
    Ok(&condition + &res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// CHW maps, finest first.
    pub levels: [Array3<f32>; 4],
}

impl FeaturePyramid {
    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels.clone().map(|l| Array3::zeros(l.dim())),
        }
    }

    pub fn spatial_sizes(&self) -> [usize; 4] {
        self.levels.each_ref().map(|l| l.dim().1)
    }

    pub fn channels(&self) -> [usize; 4] {
        self.levels.each_ref().map(|l| l.dim().0)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "level {} has non-finite values",
                    i + 1
                )));
            }
            if i > 0 {
                let (_, ph, pw) = self.levels[i - 1].dim();
                let (_, h, w) = l.dim();
                if ph != 2 * h || pw != 2 * w {
                    return Err(Error::arg(format!(
                        "level {} is not half of level {}",
                        i + 1,
                        i
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f32) -> Self {
        Self {
            levels: self.levels.clone().map(|l| l * k),
        }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let named: Vec<(String, ArrayD<f32>)> = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("level{}", i + 1), l.clone().into_dyn()))
            .collect();
        write_archive(w, PYRAMID_MAGIC, &named)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f))
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let t = read_archive(r, PYRAMID_MAGIC)?;
        if t.len() != 4 {
            return Err(Error::format(format!(
                "pyramid dump holds {} levels, expected 4",
                t.len()
            )));
        }
        let mut levels = Vec::with_capacity(4);
        for (i, (name, a)) in t.into_iter().enumerate() {
            if name != format!("level{}", i + 1) {
                return Err(Error::format(format!("unexpected tensor '{name}'")));
            }
            levels.push(
                a.into_dimensionality()
                    .map_err(|_| Error::format(format!("{name} is not a CHW map")))?,
            );
        }
        Ok(Self {
            levels: levels.try_into().unwrap(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }
}

fn convnext_block(x: &Array3<f32>, b: &ConvNextBlock) -> Array3<f32> {
    let mut h = ops::depthwise_conv(x.view(), &b.dw_weight, &b.dw_bias);
    ops::layer_norm_channels(&mut h, &b.ln_gamma, &b.ln_beta);
    let mut e = ops::pointwise(h.view(), &b.pw1_weight, &b.pw1_bias);
    e.mapv_inplace(ops::gelu);
    let y = ops::pointwise(e.view(), &b.pw2_weight, &b.pw2_bias);
    let mut out = x.clone();
    Zip::indexed(&mut out)
        .and(&y)
        .for_each(|(c, _, _), o, &v| *o += b.layer_scale[c] * v);
    out
}

/// Projection, then four stages of (3x3 conv, two ConvNeXt blocks) with
/// 2x average pooling in between.
pub fn adapter_forward(fused: ArrayView3<f32>, w: &AdapterWeights) -> Result<FeaturePyramid> {
    if let Some(n) = w.first_non_finite() {
        return Err(Error::Numeric(format!(
            "tensor '{n}' has non-finite values"
        )));
    }
    let cfg = &w.config;
    let (ch, _, _) = fused.dim();
    if ch != 3 {
        return Err(Error::arg(format!(
            "fused condition must have 3 channels, got {ch}"
        )));
    }
    let size = cfg.condition_size;
    let resized = ops::resize_bilinear(fused, size, size);
    let s = cfg.projection_stride;
    let mut x = ops::conv2d(resized.view(), &w.proj_weight, &w.proj_bias, s, 0);
    let mut levels = Vec::with_capacity(4);
    for (i, st) in w.stages.iter().enumerate() {
        if i > 0 {
            x = ops::avg_pool2(x.view())?;
        }
        x = ops::conv2d(x.view(), &st.entry_weight, &st.entry_bias, 1, 1);
        for b in &st.blocks {
            x = convnext_block(&x, b);
        }
        levels.push(x.clone());
    }
    let pyr = FeaturePyramid {
        levels: levels.try_into().unwrap(),
    };
    pyr.validate()?;
    Ok(pyr)
}

/// `F_enc + F_c`, level by level.
pub fn inject(f_enc: &FeaturePyramid, f_c: &FeaturePyramid) -> Result<FeaturePyramid> {
    for (i, (a, b)) in f_enc.levels.iter().zip(&f_c.levels).enumerate() {
        if a.dim() != b.dim() {
            return Err(Error::arg(format!(
                "level {} shapes differ: {:?} vs {:?}",
                i + 1,
                a.dim(),
                b.dim()
            )));
        }
    }
    let mut levels = f_enc.levels.clone();
    for (l, b) in levels.iter_mut().zip(&f_c.levels) {
        *l += b;
    }
    Ok(FeaturePyramid { levels })
}

/// Area-averaged downsample followed by a `>= 0.5` threshold.
pub fn resize_mask_area(mask: &BinaryMask, out_w: usize, out_h: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let spans = |o: usize, scale: f64, n: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
        let lo = a.floor() as usize;
        let hi = (b.ceil() as usize).min(n);
        (lo..hi)
            .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0)))
            .filter(|(_, f)| *f > 0.0)
            .collect()
    };
    BinaryMask::from_fn(out_w, out_h, |x, y| {
        let mut cover = 0.0;
        for (sy_i, fy) in spans(y, sy, h) {
            for &(sx_i, fx) in &spans(x, sx, w) {
                if mask.get(sx_i, sy_i) {
                    cover += fx * fy;
                }
            }
        }
        cover / (sx * sy) >= 0.5
    })
}

/// `[noised (4), coarse (4), mask (1)]` at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensor(pub Array3<f32>);

impl ConditionTensor {
    pub fn noised(&self) -> ArrayView3<'_, f32> {
        self.0.slice(s![0..LATENT_CHANNELS, .., ..])
    }

    pub fn coarse(&self) -> ArrayView3<'_, f32> {
        self.0
            .slice(s![LATENT_CHANNELS..2 * LATENT_CHANNELS, .., ..])
    }

    pub fn mask(&self) -> ArrayView3<'_, f32> {
        self.0.slice(s![2 * LATENT_CHANNELS.., .., ..])
    }
}

pub fn pack_condition(
    noised: ArrayView3<f32>,
    coarse: ArrayView3<f32>,
    mask: &BinaryMask,
) -> Result<ConditionTensor> {
    let want = (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE);
    if noised.dim() != want || coarse.dim() != want {
        return Err(Error::arg(format!(
            "latents must be {want:?}, got {:?} and {:?}",
            noised.dim(),
            coarse.dim()
        )));
    }
    let m = if mask.dims() == (LATENT_SIZE, LATENT_SIZE) {
        mask.clone()
    } else {
        resize_mask_area(mask, LATENT_SIZE, LATENT_SIZE)
    };
    let mut out = Array3::zeros((CONDITION_CHANNELS, LATENT_SIZE, LATENT_SIZE));
    out.slice_mut(s![0..LATENT_CHANNELS, .., ..])
        .assign(&noised);
    out.slice_mut(s![LATENT_CHANNELS..2 * LATENT_CHANNELS, .., ..])
        .assign(&coarse);
    for y in 0..LATENT_SIZE {
        for x in 0..LATENT_SIZE {
            out[[2 * LATENT_CHANNELS, y, x]] = if m.get(x, y) { 1.0 } else { 0.0 };
        }
    }
    Ok(ConditionTensor(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput {
    pub fused: Array3<f32>,
    pub pyramid: FeaturePyramid,
}

/// Owns the weights and runs the whole conditioning path.
#[derive(Debug, Clone)]
pub struct LevelingAdapter {
    pub weights: AdapterWeights,
}

impl LevelingAdapter {
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            weights: AdapterWeights::init(config, seed)?,
        })
    }

    /// `condition` is the coarse render at a patch-divisible size; `geometry`
    /// carries one token per patch of the reference view.
    pub fn forward(&self, condition: &ViewImage, geometry: &TokenGrid) -> Result<AdapterOutput> {
        let c = ops::image_to_chw(condition);
        let l0 = patchify_tensor(c.view(), &self.weights)?;
        let attended = cross_attention(&l0, geometry, &self.weights)?;
        let fused = unpatch_and_fuse(&attended, c.view(), &self.weights)?;
        let pyramid = adapter_forward(fused.view(), &self.weights)?;
        Ok(AdapterOutput { fused, pyramid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_layout_and_unpatch_are_inverse() {
        let c = Array3::from_shape_fn((3, 28, 42), |(k, y, x)| (k * 10_000 + y * 100 + x) as f32);
        let m = patch_matrix(c.view(), 14).unwrap();
        assert_eq!(m.dim(), (6, 588));
        assert_eq!(unpatch_matrix(&m, 2, 3, 14), c);
        assert!(patch_matrix(c.view(), 5).is_err());
    }

    #[test]
    fn half_frame_mask_resizes_to_half_frame() {
        let m = BinaryMask::from_fn(512, 512, |x, _| x < 256);
        let r = resize_mask_area(&m, 64, 64);
        assert!((0..64).all(|y| (0..64).all(|x| r.get(x, y) == (x < 32))));
        // 3x downsample with one set column out of three: coverage 1/3
        let thin = BinaryMask::from_fn(6, 3, |x, _| x % 3 == 0);
        assert_eq!(resize_mask_area(&thin, 2, 1).count(), 0);
    }

    #[test]
    fn pack_layout() {
        let n = Array3::from_elem((4, 64, 64), 1.0f32);
        let c = Array3::from_elem((4, 64, 64), 2.0f32);
        let m = BinaryMask::from_fn(64, 64, |x, _| x == 0);
        let t = pack_condition(n.view(), c.view(), &m).unwrap();
        assert_eq!(t.0.dim(), (9, 64, 64));
        assert!(t.noised().iter().all(|v| *v == 1.0));
        assert!(t.coarse().iter().all(|v| *v == 2.0));
        assert_eq!(t.mask().sum(), 64.0);
        let bad = Array3::zeros((3, 64, 64));
        assert!(pack_condition(bad.view(), c.view(), &m).is_err());
    }
}
