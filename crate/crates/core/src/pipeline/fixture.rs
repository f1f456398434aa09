//! A small synthetic two-view RGBD scene used by the examples, the tests and
//! `gsrefine run` smoke checks: a textured wall at `z = 3` with a box in
//! front of it, seen by two cameras that straddle the origin.

use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};

use super::backend::ReconView;
use super::config::{BackendConfig, InputsConfig, PipelineConfig, RunConfig};
use super::poses::PoseSampling;
use crate::error::{Error, Result};
use crate::scene::{save_camera_set, CameraPose, DepthMap, ViewImage};

pub const FIXTURE_SIZE: usize = 64;
pub const FIXTURE_FOCAL: f64 = 60.0;
pub const WALL_Z: f64 = 3.0;
pub const BOX_MIN: [f64; 3] = [-0.25, -0.25, 2.0];
pub const BOX_MAX: [f64; 3] = [0.25, 0.25, 2.3];
pub const BASELINE: f64 = 1.0;
/// Overshoot written into the fixture config; the widest exterior poses expose wall the inputs never saw.
pub const FIXTURE_OVERSHOOT: f64 = 0.5;

/// Camera at `(x, 0, 0)` turned to look at the middle of the wall.
pub fn fixture_camera(x: f64, size: usize, focal: f64) -> CameraPose {
    let yaw = (-x).atan2(WALL_Z);
    let cam_to_world = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let mut pose = CameraPose::looking_down_z(size, size, focal);
    pose.cx = size as f64 / 2.0;
    pose.cy = size as f64 / 2.0;
    pose.with_center(cam_to_world.matrix().transpose(), Vector3::new(x, 0.0, 0.0))
}

pub fn fixture_cameras() -> Vec<CameraPose> {
    [-BASELINE / 2.0, BASELINE / 2.0]
        .iter()
        .map(|&x| fixture_camera(x, FIXTURE_SIZE, FIXTURE_FOCAL))
        .collect()
}

fn wall_color(p: &Vector3<f64>) -> [f32; 3] {
    [
        0.5 + 0.15 * (1.2 * p.x).sin() * (0.9 * p.y).cos(),
        0.45 + 0.12 * (1.1 * p.y + 0.4).sin(),
        0.55 + 0.1 * (0.8 * (p.x + p.y)).cos(),
    ]
    .map(|v| v as f32)
}

/// Box faces reuse the wall palette, offset per face, so silhouettes stay low contrast.
fn box_color(p: &Vector3<f64>, face: usize) -> [f32; 3] {
    let offset = [0.12, 0.09, 0.09, 0.06, 0.06, 0.03][face] as f32;
    let w = wall_color(p);
    [w[0] + offset, w[1] - offset, w[2] - offset / 2.0]
}

/// Slab test against the box; returns the entry distance and face index.
fn hit_box(o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
    let (mut t0, mut t1, mut face) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < BOX_MIN[a] || o[a] > BOX_MAX[a] {
                return None;
            }
            continue;
        }
        let (mut near, mut far) = ((BOX_MIN[a] - o[a]) / d[a], (BOX_MAX[a] - o[a]) / d[a]);
        let mut f = 2 * a;
        if near > far {
            std::mem::swap(&mut near, &mut far);
            f += 1;
        }
        if near > t0 {
            t0 = near;
            face = [4, 0, 2][a] + (f % 2);
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, face))
}

/// Ray-cast color and camera depth for one pose. Depth is the camera-space z.
pub fn render_fixture_view(pose: &CameraPose) -> (ViewImage, DepthMap) {
    let (w, h) = (pose.width, pose.height);
    let c = pose.center();
    let rt = pose.rotation.transpose();
    let mut depth = vec![0.0; w * h];
    let image = ViewImage::from_fn(w, h, |x, y| {
        let dc = Vector3::new(
            (x as f64 - pose.cx) / pose.fx,
            (y as f64 - pose.cy) / pose.fy,
            1.0,
        );
        let d = rt * dc;
        let (t, color) = match hit_box(&c, &d) {
            Some((t, face)) => (t, box_color(&(c + d * t), face)),
            None => {
                let t = (WALL_Z - c.z) / d.z;
                (t, wall_color(&(c + d * t)))
            }
        };
        depth[y * w + x] = t as f32;
        color
    });
    let depth = DepthMap::from_values(w, h, depth).expect("ray depths are positive");
    (image.quantized(), depth.quantized())
}

/// Both fixture views with their quantized color and depth.
pub fn fixture_views() -> Vec<ReconView> {
    fixture_cameras()
        .into_iter()
        .enumerate()
        .map(|(k, pose)| {
            let (image, depth) = render_fixture_view(&pose);
            ReconView {
                label: format!("input:{k}"),
                image,
                depth: Some(depth),
                pose,
            }
        })
        .collect()
}

/// Writes cameras, images, depths and a stub-backed `config.toml` into `dir`
/// and returns the config path. Paths inside the config are relative.
pub fn write_fixture(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let views = fixture_views();
    let cams: Vec<CameraPose> = views.iter().map(|v| v.pose.clone()).collect();
    save_camera_set(&cams, dir.join("cameras.txt"))?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for (k, v) in views.iter().enumerate() {
        let img = PathBuf::from(format!("view{k}.png"));
        let dep = PathBuf::from(format!("depth{k}.png"));
        v.image.save_png(dir.join(&img))?;
        v.depth
            .as_ref()
            .expect("fixture views carry depth")
            .save_png(dir.join(&dep))?;
        images.push(img);
        depths.push(dep);
    }
    let cfg = PipelineConfig {
        inputs: InputsConfig {
            cameras: "cameras.txt".into(),
            images,
            depths,
            scene: None,
            tokens: None,
            reference: 0,
        },
        poses: PoseSampling {
            per_gap: 4,
            overshoot: FIXTURE_OVERSHOOT,
        },
        mask: Default::default(),
        generator: BackendConfig::default(),
        reconstructor: BackendConfig::default(),
        run: RunConfig::default(),
    };
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
