//! Pinhole cameras and the plain-text camera set format.
//!
//! Convention: `rotation`/`translation` map world to camera coordinates,
//! `x_cam = R * x_world + t`. The camera looks down +z, image x grows to the
//! right, image y grows downward, and the origin sits at the top-left pixel.
//! Pixel `(col, row)` is sampled at exactly `(col, row)`.
//!
//! File layout, one block per camera, `#` starts a comment:
//!
//! ```text
//! camera <name>
//! rotation r00 r01 r02 r10 r11 r12 r20 r21 r22
//! translation tx ty tz
//! intrinsics fx fy cx cy
//! size width height
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;
const MAX_DRIFT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Camera at the origin looking down +z with the principal point at the image center.
    pub fn looking_down_z(width: usize, height: usize, focal: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Replaces the extrinsics so that the camera sits at `center` with world-to-camera rotation `rotation`.
    pub fn with_center(mut self, rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        self.rotation = rotation;
        self.translation = -(rotation * center);
        self
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pinhole projection of a camera-space point.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Back-projects pixel `(u, v)` at camera-space depth `z` to world coordinates.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let cam = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.rotation.transpose() * (cam - self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::arg("camera extrinsics are not finite"));
        }
        let drift = (r * r.transpose() - Matrix3::identity()).abs().max();
        if drift > ORTHONORMAL_TOL {
            return Err(Error::arg(format!(
                "rotation is not orthonormal (deviation {drift:e})"
            )));
        }
        if r.determinant() <= 0.0 {
            return Err(Error::arg("rotation determinant must be +1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::arg("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("image size must be positive"));
        }
        if !(self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::arg(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Projects a near-orthonormal matrix onto SO(3) (polar decomposition via SVD).
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if m.determinant() <= 0.0 {
        return Err(Error::arg("rotation determinant must be positive"));
    }
    let drift = (m.transpose() * m - Matrix3::identity()).norm();
    if drift > MAX_DRIFT {
        return Err(Error::arg(format!(
            "rotation drifts {drift:e} from orthonormal, more than the {MAX_DRIFT:e} tolerance"
        )));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    Ok(u * v_t)
}

struct Partial {
    name: String,
    rotation: Option<[f64; 9]>,
    translation: Option<[f64; 3]>,
    intrinsics: Option<[f64; 4]>,
    size: Option<[f64; 2]>,
}

impl Partial {
    fn finish(self, index: usize) -> Result<CameraPose> {
        let missing = |what: &str| {
            Error::format(format!(
                "camera {} ('{}') is missing '{what}'",
                index, self.name
            ))
        };
        let rot = self.rotation.ok_or_else(|| missing("rotation"))?;
        let t = self.translation.ok_or_else(|| missing("translation"))?;
        let k = self.intrinsics.ok_or_else(|| missing("intrinsics"))?;
        let size = self.size.ok_or_else(|| missing("size"))?;
        if size.iter().any(|s| *s < 1.0 || s.fract() != 0.0) {
            return Err(Error::data(index, "size must be positive integers"));
        }
        let raw = Matrix3::from_row_slice(&rot);
        let rotation = nearest_rotation(&raw).map_err(|e| Error::data(index, e.to_string()))?;
        let cam = CameraPose {
            rotation,
            translation: Vector3::from(t),
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
            width: size[0] as usize,
            height: size[1] as usize,
        };
        cam.validate()
            .map_err(|e| Error::data(index, e.to_string()))?;
        Ok(cam)
    }
}

fn parse_numbers<const N: usize>(rest: &str, line_no: usize) -> Result<[f64; N]> {
    let vals: Vec<f64> = rest
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(format!("line {line_no}: {e}")))?;
    vals.try_into().map_err(|v: Vec<f64>| {
        Error::format(format!(
            "line {line_no}: expected {N} numbers, found {}",
            v.len()
        ))
    })
}

pub fn parse_camera_set(text: &str) -> Result<Vec<CameraPose>> {
    let mut cams = Vec::new();
    let mut current: Option<Partial> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        if key == "camera" {
            if let Some(p) = current.take() {
                cams.push(p.finish(cams.len())?);
            }
            current = Some(Partial {
                name: rest.trim().to_string(),
                rotation: None,
                translation: None,
                intrinsics: None,
                size: None,
            });
            continue;
        }
        let p = current.as_mut().ok_or_else(|| {
            Error::format(format!(
                "line {line_no}: '{key}' before any 'camera' record"
            ))
        })?;
        match key {
            "rotation" => p.rotation = Some(parse_numbers(rest, line_no)?),
            "translation" => p.translation = Some(parse_numbers(rest, line_no)?),
            "intrinsics" => p.intrinsics = Some(parse_numbers(rest, line_no)?),
            "size" => p.size = Some(parse_numbers(rest, line_no)?),
            other => {
                return Err(Error::format(format!(
                    "line {line_no}: unknown key '{other}'"
                )))
            }
        }
    }
    if let Some(p) = current.take() {
        cams.push(p.finish(cams.len())?);
    }
    Ok(cams)
}

pub fn load_camera_set(path: impl AsRef<Path>) -> Result<Vec<CameraPose>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_camera_set(&text)
}

pub fn write_camera_set(cams: &[CameraPose]) -> String {
    let mut out = String::from("# world-to-camera extrinsics, +z forward, origin top-left\n");
    for (i, c) in cams.iter().enumerate() {
        let r = &c.rotation;
        let _ = writeln!(out, "camera {i}");
        let _ = writeln!(
            out,
            "rotation {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)]
        );
        let t = &c.translation;
        let _ = writeln!(out, "translation {:?} {:?} {:?}", t.x, t.y, t.z);
        let _ = writeln!(
            out,
            "intrinsics {:?} {:?} {:?} {:?}",
            c.fx, c.fy, c.cx, c.cy
        );
        let _ = writeln!(out, "size {} {}", c.width, c.height);
    }
    out
}

pub fn save_camera_set(cams: &[CameraPose], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_camera_set(cams)).map_err(|e| Error::io(path, e))
}
