use crate::scene::{CameraPose, DepthMap, GaussianScene, ScalarMap, ViewImage};

use super::{project_scene, RenderOptions, RenderOutput, DEPTH_ALPHA_EPS};

/// Reference rasterizer: every projected Gaussian is tested at every pixel.
///
/// Shares only the projection step with [`super::render`]; sorting, the
/// falloff, and compositing are written out independently.
pub fn render_oracle(
    scene: &GaussianScene,
    cam: &CameraPose,
    opts: &RenderOptions,
) -> RenderOutput {
    let (width, height) = (cam.width, cam.height);
    let (mut projected, stats) = project_scene(scene, cam, opts);
    projected.sort_by(|a, b| {
        a.view_depth
            .partial_cmp(&b.view_depth)
            .expect("finite depth")
            .then(a.index.cmp(&b.index))
    });
    let inverses: Vec<_> = projected
        .iter()
        .map(|p| p.cov2d.try_inverse().expect("positive definite"))
        .collect();
    let cutoff_sq = opts.sigma_cutoff * opts.sigma_cutoff;

    let n = width * height;
    let mut color = vec![[0f32; 3]; n];
    let mut alpha_map = vec![0f32; n];
    let mut depth_map = vec![0f32; n];
    let mut residual = vec![1f32; n];

    for y in 0..height {
        for x in 0..width {
            let pixel = nalgebra::Vector2::new(x as f64, y as f64);
            let mut t = 1.0f64;
            let mut rgb = [0f64; 3];
            let mut weight_sum = 0f64;
            let mut depth_sum = 0f64;
            for (p, inv) in projected.iter().zip(&inverses) {
                let d = pixel - p.mean2d;
                let q = (d.transpose() * inv * d)[(0, 0)];
                if q > cutoff_sq {
                    continue;
                }
                let mut a = p.opacity * (-0.5 * q).exp();
                if let Some(clamp) = opts.alpha_clamp {
                    if a > clamp {
                        a = clamp;
                    }
                }
                if a < opts.min_alpha {
                    continue;
                }
                let w = a * t;
                rgb[0] += p.color[0] * w;
                rgb[1] += p.color[1] * w;
                rgb[2] += p.color[2] * w;
                weight_sum += w;
                depth_sum += p.view_depth * w;
                t *= 1.0 - a;
                if let Some(stop) = opts.early_stop {
                    if t < stop {
                        break;
                    }
                }
            }
            let i = y * width + x;
            for c in 0..3 {
                color[i][c] = (rgb[c] + opts.background[c] as f64 * (1.0 - weight_sum)) as f32;
            }
            alpha_map[i] = weight_sum.clamp(0.0, 1.0) as f32;
            residual[i] = t as f32;
            depth_map[i] = if weight_sum < DEPTH_ALPHA_EPS {
                0.0
            } else {
                (depth_sum / weight_sum).max(0.0) as f32
            };
        }
    }

    let alpha = ScalarMap::from_values(width, height, alpha_map).expect("size");
    RenderOutput {
        color: ViewImage::from_pixels(width, height, color).expect("size"),
        depth: DepthMap::from_values(width, height, depth_map).expect("finite depth"),
        transmittance: alpha.clone(),
        alpha,
        residual: ScalarMap::from_values(width, height, residual).expect("size"),
        stats,
    }
}
