//! Scene, camera, image and token types plus their on-disk formats.

mod camera;
mod image;
mod ply;
mod tokens;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub use self::camera::{
    load_camera_set, parse_camera_set, save_camera_set, write_camera_set, CameraPose,
};
pub use self::image::{DepthMap, ScalarMap, ViewImage, DEPTH_PNG_SCALE};
pub use self::ply::{
    load_scene_ply, logit, read_raw_splats, read_scene_ply, save_scene_ply, sigmoid,
    write_raw_splats, write_scene_ply, RawSplat, SH_C0,
};
pub use self::tokens::{
    load_f32_container, load_token_grid, read_token_grid, save_token_grid, write_token_grid,
    TokenGrid, PATCH_SIZE, TOKEN_DIM, TOKEN_MAGIC,
};

/// One anisotropic 3D Gaussian with activated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    /// Per-axis standard deviations in world units.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    /// Isotropic, axis-aligned primitive.
    pub fn isotropic(center: [f64; 3], sigma: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            center: Vector3::from(center),
            scale: Vector3::repeat(sigma),
            rotation: UnitQuaternion::identity(),
            opacity,
            color,
        }
    }

    /// Builds a primitive from a (w, x, y, z) quaternion, normalizing it.
    pub fn from_wxyz(
        center: [f64; 3],
        scale: [f64; 3],
        wxyz: [f64; 4],
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::arg("rotation quaternion has zero norm"));
        }
        let prim = Self {
            center: Vector3::from(center),
            scale: Vector3::from(scale),
            rotation: UnitQuaternion::from_quaternion(q),
            opacity,
            color,
        };
        prim.validate().map_err(Error::InvalidArgument)?;
        Ok(prim)
    }

    /// (w, x, y, z) components of the rotation.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// World-space covariance R diag(s^2) R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err("center is not finite".into());
        }
        if !self.scale.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(format!(
                "scale {:?} must be finite and strictly positive",
                self.scale.as_slice()
            ));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(format!("color {:?} outside [0, 1]", self.color));
        }
        Ok(())
    }
}

/// A reconstructed scene. Primitive order carries no meaning for rendering
/// beyond the equal-depth tie rule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub source_id: String,
}

impl GaussianScene {
    pub fn new(source_id: impl Into<String>, primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            primitives,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate().map_err(|m| Error::data(i, m))?;
        }
        Ok(())
    }
}
