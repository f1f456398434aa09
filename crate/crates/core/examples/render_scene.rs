//! Renders a handful of random Gaussians with the tiled rasterizer, checks it
//! against the per-pixel reference path, and writes color/depth/opacity PNGs.
//!
//! cargo run --example render_scene -- [out_dir]

use gsrefine::render::{render, render_oracle, RenderOptions};
use gsrefine::scene::{CameraPose, GaussianPrimitive, GaussianScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gsrefine::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/render_scene".into());
    std::fs::create_dir_all(&out).expect("create output dir");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prims = (0..48)
        .map(|_| {
            let c = [
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(2.0..4.0),
            ];
            let s = [
                rng.random_range(0.03..0.2),
                rng.random_range(0.03..0.2),
                rng.random_range(0.03..0.2),
            ];
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                1.0,
            ];
            let col = [rng.random(), rng.random(), rng.random()];
            GaussianPrimitive::from_wxyz(c, s, q, rng.random_range(0.3..0.95), col)
        })
        .collect::<gsrefine::Result<Vec<_>>>()?;
    let scene = GaussianScene::new("random-48", prims);
    let cam = CameraPose::looking_down_z(128, 96, 110.0);

    let opts = RenderOptions::default();
    let t = std::time::Instant::now();
    let fast = render(&scene, &cam, &opts);
    let fast_time = t.elapsed();
    let slow = render_oracle(&scene, &cam, &opts);

    let max_diff = fast
        .color
        .pixels()
        .iter()
        .zip(slow.color.pixels())
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
        .fold(0.0f32, f32::max);
    println!("tiled render in {fast_time:?}, max channel difference to reference {max_diff:e}");
    println!(
        "stats {:?}, mean opacity {:.3}",
        fast.stats,
        fast.alpha.mean()
    );

    fast.color.save_png(format!("{out}/color.png"))?;
    fast.depth.save_png(format!("{out}/depth.png"))?;
    fast.alpha.save_png16(format!("{out}/opacity.png"))?;
    println!("wrote {out}/{{color,depth,opacity}}.png");
    Ok(())
}
