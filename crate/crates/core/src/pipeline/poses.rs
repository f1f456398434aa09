use nalgebra::{Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::CameraPose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSampling {
    pub per_gap: usize,
    /// Fraction of the adjacent gap to extrapolate beyond the first and last input.
    pub overshoot: f64,
}

impl Default for PoseSampling {
    fn default() -> Self {
        Self {
            per_gap: 4,
            overshoot: 0.25,
        }
    }
}

fn quat(c: &CameraPose) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(c.rotation))
}

/// `q0 (q0^-1 q1)^t` along the shorter arc; `t` outside [0, 1] keeps going
/// along the same great circle.
pub fn slerp(q0: &UnitQuaternion<f64>, q1: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let mut q1 = *q1;
    if q0.coords.dot(&q1.coords) < 0.0 {
        q1 = UnitQuaternion::new_unchecked(-q1.into_inner());
    }
    let delta = q0.inverse() * q1;
    match delta.axis_angle() {
        Some((axis, angle)) => q0 * UnitQuaternion::from_axis_angle(&axis, angle * t),
        None => *q0,
    }
}

/// Pose at parameter `t` between `a` (t = 0) and `b` (t = 1). The camera center
/// moves linearly; intrinsics come from the nearer endpoint, `a` on ties.
pub fn interpolate_pose(a: &CameraPose, b: &CameraPose, t: f64) -> CameraPose {
    let q = slerp(&quat(a), &quat(b), t);
    let center = a.center() * (1.0 - t) + b.center() * t;
    let base = if t <= 0.5 { a.clone() } else { b.clone() };
    base.with_center(*q.to_rotation_matrix().matrix(), center)
}

/// Exterior pose before the first input, `per_gap` poses inside every gap, and
/// an exterior pose after the last input, in trajectory order.
pub fn sample_extrapolated_poses(
    inputs: &[CameraPose],
    sampling: PoseSampling,
) -> Result<Vec<CameraPose>> {
    if inputs.len() < 2 {
        return Err(Error::arg(format!(
            "need at least 2 input poses, got {}",
            inputs.len()
        )));
    }
    if sampling.per_gap == 0 {
        return Err(Error::arg("per_gap must be at least 1"));
    }
    if !(0.0..=0.5).contains(&sampling.overshoot) {
        return Err(Error::arg(format!(
            "overshoot {} outside [0, 0.5]",
            sampling.overshoot
        )));
    }
    let n = inputs.len();
    let mut out = Vec::with_capacity((n - 1) * sampling.per_gap + 2);
    let exterior = sampling.overshoot > 0.0;
    if exterior {
        out.push(interpolate_pose(
            &inputs[0],
            &inputs[1],
            -sampling.overshoot,
        ));
    }
    for pair in inputs.windows(2) {
        for k in 1..=sampling.per_gap {
            let t = k as f64 / (sampling.per_gap + 1) as f64;
            out.push(interpolate_pose(&pair[0], &pair[1], t));
        }
    }
    if exterior {
        out.push(interpolate_pose(
            &inputs[n - 2],
            &inputs[n - 1],
            1.0 + sampling.overshoot,
        ));
    }
    Ok(out)
}
