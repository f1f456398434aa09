//! Extrapolated camera poses around three input cameras, written as a camera set.
//!
//! cargo run --example pose_sampling -- [out_dir]

use gsrefine::pipeline::{sample_extrapolated_poses, PoseSampling};
use gsrefine::scene::{save_camera_set, CameraPose};
use nalgebra::{Rotation3, Vector3};

fn main() -> gsrefine::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/pose_sampling".into());
    std::fs::create_dir_all(&out).expect("create output dir");

    let inputs: Vec<CameraPose> = [-0.6f64, 0.0, 0.7]
        .iter()
        .map(|&x| {
            let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), -0.3 * x);
            CameraPose::looking_down_z(96, 72, 80.0)
                .with_center(yaw.matrix().transpose(), Vector3::new(x, 0.0, 0.0))
        })
        .collect();
    let sampling = PoseSampling::default();
    let poses = sample_extrapolated_poses(&inputs, sampling)?;
    println!(
        "{} inputs, {sampling:?} -> {} poses",
        inputs.len(),
        poses.len()
    );
    for (i, p) in poses.iter().enumerate() {
        let c = p.center();
        println!("pose {i:2}: center ({:+.3}, {:+.3}, {:+.3})", c.x, c.y, c.z);
    }
    save_camera_set(&poses, format!("{out}/extrapolated.txt"))?;
    Ok(())
}
