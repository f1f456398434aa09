//! Gaussian splatting rasterizer.
//!
//! [`render`] bins projected Gaussians into square tiles and composites
//! each tile in parallel. [`render_oracle`] evaluates every Gaussian at every
//! pixel; both follow the same contract and must agree to within 1e-5.

mod oracle;
mod project;
mod tiled;

use crate::scene::{DepthMap, ScalarMap, ViewImage};

pub use self::oracle::render_oracle;
pub use self::project::{project_gaussian, project_scene, CullReason, Projected2D, Projection};
pub use self::tiled::render;

/// Depth below which accumulated alpha is treated as empty for the depth map.
pub(crate) const DEPTH_ALPHA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    /// Composited as `color + background * (1 - alpha)`.
    pub background: [f32; 3],
    pub tile_size: usize,
    /// Upper bound on per-Gaussian alpha; `None` disables the clamp.
    pub alpha_clamp: Option<f64>,
    /// Contributions with alpha below this are skipped.
    pub min_alpha: f64,
    /// Stop compositing once transmittance falls below this; `None` composites everything.
    pub early_stop: Option<f64>,
    /// Added to the diagonal of every screen-space covariance.
    pub low_pass: f64,
    pub near_plane: f64,
    /// Support radius in standard deviations; pixels farther out receive no contribution.
    pub sigma_cutoff: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile_size: 16,
            alpha_clamp: Some(0.99),
            min_alpha: 1.0 / 255.0,
            early_stop: Some(1e-4),
            low_pass: 0.3,
            near_plane: 0.01,
            sigma_cutoff: 3.0,
        }
    }
}

impl RenderOptions {
    /// No clamp and no early termination: every contribution is composited.
    pub fn exact() -> Self {
        Self {
            alpha_clamp: None,
            early_stop: None,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled_near: usize,
    pub culled_offscreen: usize,
    pub culled_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ViewImage,
    /// Alpha-weighted expected depth normalized by accumulated alpha; 0 where nothing was hit.
    pub depth: DepthMap,
    /// Accumulated compositing weight, `sum_i w_i`.
    pub alpha: ScalarMap,
    /// The transmittance map O used for masking. Equal to `alpha`.
    pub transmittance: ScalarMap,
    /// Product of `(1 - alpha_i)` over the composited Gaussians.
    pub residual: ScalarMap,
    pub stats: RenderStats,
}

/// Per-pixel compositing state shared by both render paths.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelAccum {
    pub color: [f64; 3],
    pub weight: f64,
    pub depth: f64,
    pub transmittance: f64,
}

impl PixelAccum {
    pub fn new() -> Self {
        Self {
            color: [0.0; 3],
            weight: 0.0,
            depth: 0.0,
            transmittance: 1.0,
        }
    }

    /// Composites one contribution. Returns `false` once compositing should stop.
    #[inline]
    pub fn add(&mut self, alpha: f64, color: &[f64; 3], depth: f64, opts: &RenderOptions) -> bool {
        let w = alpha * self.transmittance;
        for c in 0..3 {
            self.color[c] += color[c] * w;
        }
        self.weight += w;
        self.depth += depth * w;
        self.transmittance *= 1.0 - alpha;
        !matches!(opts.early_stop, Some(t) if self.transmittance < t)
    }
}

/// Converts a raw Gaussian falloff into the composited alpha, or `None` when skipped.
#[inline]
pub(crate) fn contribution_alpha(
    opacity: f64,
    mahalanobis_sq: f64,
    opts: &RenderOptions,
) -> Option<f64> {
    if mahalanobis_sq > opts.sigma_cutoff * opts.sigma_cutoff {
        return None;
    }
    let mut alpha = opacity * (-0.5 * mahalanobis_sq).exp();
    if let Some(max) = opts.alpha_clamp {
        alpha = alpha.min(max);
    }
    (alpha >= opts.min_alpha).then_some(alpha)
}

pub(crate) struct Canvas {
    width: usize,
    height: usize,
    color: Vec<[f32; 3]>,
    depth: Vec<f32>,
    alpha: Vec<f32>,
    residual: Vec<f32>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
            residual: vec![1.0; n],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, acc: &PixelAccum, bg: &[f32; 3]) {
        let i = y * self.width + x;
        let rest = 1.0 - acc.weight;
        self.color[i] = [0, 1, 2].map(|c| (acc.color[c] + bg[c] as f64 * rest) as f32);
        self.alpha[i] = acc.weight.clamp(0.0, 1.0) as f32;
        self.residual[i] = acc.transmittance as f32;
        self.depth[i] = if acc.weight < DEPTH_ALPHA_EPS {
            0.0
        } else {
            (acc.depth / acc.weight.max(DEPTH_ALPHA_EPS)).max(0.0) as f32
        };
    }

    pub fn finish(self, stats: RenderStats) -> RenderOutput {
        let (w, h) = (self.width, self.height);
        let alpha = ScalarMap::from_values(w, h, self.alpha).expect("canvas size");
        RenderOutput {
            color: ViewImage::from_pixels(w, h, self.color).expect("canvas size"),
            depth: DepthMap::from_values(w, h, self.depth)
                .expect("depth is finite and non-negative"),
            transmittance: alpha.clone(),
            alpha,
            residual: ScalarMap::from_values(w, h, self.residual).expect("canvas size"),
            stats,
        }
    }
}
