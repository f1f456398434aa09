use nalgebra::{Matrix2, Matrix2x3, Vector2};

use crate::scene::{CameraPose, GaussianPrimitive, GaussianScene};

use super::{RenderOptions, RenderStats};

/// A Gaussian splatted to the image plane (EWA approximation).
#[derive(Debug, Clone, PartialEq)]
pub struct Projected2D {
    /// Index of the source primitive in the scene.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    /// Screen covariance including the low-pass term, pixels^2.
    pub cov2d: Matrix2<f64>,
    /// Inverse covariance packed as (a, b, c) for `a dx^2 + 2 b dx dy + c dy^2`.
    pub conic: [f64; 3],
    /// Half extents of the cutoff ellipse's bounding box, pixels.
    pub extent: Vector2<f64>,
    pub view_depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl Projected2D {
    #[inline]
    pub fn mahalanobis_sq(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let [a, b, c] = self.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }

    /// Pixel bounding box `(x0, y0, x1, y1)` inclusive, clipped to the image.
    pub fn pixel_bounds(
        &self,
        width: usize,
        height: usize,
    ) -> Option<(usize, usize, usize, usize)> {
        let x0 = (self.mean2d.x - self.extent.x).ceil().max(0.0);
        let y0 = (self.mean2d.y - self.extent.y).ceil().max(0.0);
        let x1 = (self.mean2d.x + self.extent.x)
            .floor()
            .min(width as f64 - 1.0);
        let y1 = (self.mean2d.y + self.extent.y)
            .floor()
            .min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CullReason {
    /// Camera-space depth at or below the near plane.
    Near,
    /// The cutoff ellipse does not touch the image.
    OffScreen,
    /// Screen covariance not positive definite even after regularization.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Visible(Projected2D),
    Culled(CullReason),
}

pub fn project_gaussian(
    g: &GaussianPrimitive,
    index: usize,
    cam: &CameraPose,
    opts: &RenderOptions,
) -> Projection {
    let p = cam.world_to_camera(&g.center);
    if !(p.z > opts.near_plane) {
        return Projection::Culled(CullReason::Near);
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let j = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let w = cam.rotation;
    let sigma_cam = w * g.covariance() * w.transpose();
    let mut cov = j * sigma_cam * j.transpose();
    // symmetrize away round-off before regularizing
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    cov[(0, 0)] += opts.low_pass;
    cov[(1, 1)] += opts.low_pass;

    let det = cov[(0, 0)] * cov[(1, 1)] - off * off;
    if !(det > 0.0 && det.is_finite()) {
        return Projection::Culled(CullReason::Degenerate);
    }
    let conic = [cov[(1, 1)] / det, -off / det, cov[(0, 0)] / det];
    let extent = Vector2::new(
        opts.sigma_cutoff * cov[(0, 0)].sqrt(),
        opts.sigma_cutoff * cov[(1, 1)].sqrt(),
    );
    let mean2d = cam.project_camera_point(&p);
    let proj = Projected2D {
        index,
        mean2d,
        cov2d: cov,
        conic,
        extent,
        view_depth: z,
        color: g.color,
        opacity: g.opacity,
    };
    if proj.pixel_bounds(cam.width, cam.height).is_none() {
        return Projection::Culled(CullReason::OffScreen);
    }
    Projection::Visible(proj)
}

/// Projects every primitive, returning survivors in scene order.
pub fn project_scene(
    scene: &GaussianScene,
    cam: &CameraPose,
    opts: &RenderOptions,
) -> (Vec<Projected2D>, RenderStats) {
    let mut stats = RenderStats::default();
    let mut out = Vec::with_capacity(scene.len());
    for (i, g) in scene.primitives.iter().enumerate() {
        match project_gaussian(g, i, cam, opts) {
            Projection::Visible(p) => {
                stats.visible += 1;
                out.push(p);
            }
            Projection::Culled(CullReason::Near) => stats.culled_near += 1,
            Projection::Culled(CullReason::OffScreen) => stats.culled_offscreen += 1,
            Projection::Culled(CullReason::Degenerate) => stats.culled_degenerate += 1,
        }
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(f: f64) -> CameraPose {
        CameraPose::looking_down_z(64, 64, f)
    }

    #[test]
    fn isotropic_on_axis_matches_symbolic_jacobian() {
        // On the optical axis J = [[f/z, 0, 0], [0, f/z, 0]], so J I J^T = (f/z)^2 I.
        let (f, z, s) = (50.0, 4.0, 1.0);
        let g = GaussianPrimitive::isotropic([0.0, 0.0, z], s, 0.8, [0.1, 0.2, 0.3]);
        let Projection::Visible(p) = project_gaussian(&g, 0, &cam(f), &RenderOptions::default())
        else {
            panic!("culled");
        };
        let expected = (f / z).powi(2) * s * s + 0.3;
        assert!((p.cov2d[(0, 0)] - expected).abs() < 1e-12);
        assert!((p.cov2d[(1, 1)] - expected).abs() < 1e-12);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
        assert_eq!(p.mean2d, Vector2::new(32.0, 32.0));
        assert_eq!(p.view_depth, z);
    }

    #[test]
    fn off_axis_jacobian_matches_hand_evaluation() {
        // center (1, 0.5, 2), f = 40, isotropic sigma 0.1:
        // J = [[20, 0, -10], [0, 20, -5]]; J J^T * 0.01 = [[5, 0.5], [0.5, 4.25]]
        let g = GaussianPrimitive::isotropic([1.0, 0.5, 2.0], 0.1, 1.0, [0.0; 3]);
        let Projection::Visible(p) = project_gaussian(&g, 0, &cam(40.0), &RenderOptions::default())
        else {
            panic!("culled");
        };
        assert!((p.cov2d[(0, 0)] - 5.3).abs() < 1e-12);
        assert!((p.cov2d[(0, 1)] - 0.5).abs() < 1e-12);
        assert!((p.cov2d[(1, 1)] - 4.55).abs() < 1e-12);
        assert_eq!(p.mean2d, Vector2::new(52.0, 42.0));
    }

    #[test]
    fn behind_camera_and_near_plane_are_culled() {
        let opts = RenderOptions::default();
        let behind = GaussianPrimitive::isotropic([0.0, 0.0, -1.0], 0.1, 1.0, [1.0; 3]);
        assert_eq!(
            project_gaussian(&behind, 0, &cam(50.0), &opts),
            Projection::Culled(CullReason::Near)
        );
        let near = GaussianPrimitive::isotropic([0.0, 0.0, 0.01], 0.1, 1.0, [1.0; 3]);
        assert_eq!(
            project_gaussian(&near, 0, &cam(50.0), &opts),
            Projection::Culled(CullReason::Near)
        );
    }

    #[test]
    fn far_outside_frustum_is_culled_offscreen() {
        let g = GaussianPrimitive::isotropic([100.0, 0.0, 1.0], 0.01, 1.0, [1.0; 3]);
        let out = project_gaussian(&g, 0, &cam(50.0), &RenderOptions::default());
        assert_eq!(out, Projection::Culled(CullReason::OffScreen));
    }

    #[test]
    fn degenerate_covariance_is_counted() {
        let opts = RenderOptions {
            low_pass: 0.0,
            ..RenderOptions::default()
        };
        let mut g = GaussianPrimitive::isotropic([0.0, 0.0, 2.0], 1e-300, 1.0, [1.0; 3]);
        g.scale = nalgebra::Vector3::new(1e-300, 1e-300, 1e-300);
        let scene = GaussianScene::new("d", vec![g]);
        let (vis, stats) = project_scene(&scene, &cam(50.0), &opts);
        assert!(vis.is_empty());
        assert_eq!(stats.culled_degenerate, 1);
    }
}
