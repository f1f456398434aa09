//! Opacity mask of a sparse splat cloud and each refinement stage, saved as PNGs.
//!
//! cargo run --example mask_refine -- [out_dir]

use gsrefine::mask::{opacity_mask, refine_mask_stages, RefineParams, DEFAULT_ETA_MASK};
use gsrefine::render::{render, RenderOptions};
use gsrefine::scene::{CameraPose, GaussianPrimitive, GaussianScene};

fn main() -> gsrefine::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/mask_refine".into());
    std::fs::create_dir_all(&out).expect("create output dir");

    // a grid of blobs with a few missing, so the mask has pinholes and one large gap
    let mut prims = Vec::new();
    for i in 0..12 {
        for j in 0..12 {
            if (i * 7 + j * 3) % 11 == 0 || (4..7).contains(&i) && (5..9).contains(&j) {
                continue;
            }
            let x = -1.1 + 0.2 * i as f64;
            let y = -1.1 + 0.2 * j as f64;
            prims.push(GaussianPrimitive::isotropic(
                [x, y, 3.0],
                0.07,
                0.9,
                [0.8, 0.7, 0.5],
            ));
        }
    }
    let scene = GaussianScene::new("grid", prims);
    let cam = CameraPose::looking_down_z(128, 128, 150.0);
    let o = render(&scene, &cam, &RenderOptions::default()).transmittance;

    let raw = opacity_mask(&o, DEFAULT_ETA_MASK)?;
    let stages = refine_mask_stages(&raw, RefineParams::default())?;
    let frac = |m: &gsrefine::mask::BinaryMask| m.count() as f64 / (128.0 * 128.0);
    println!(
        "mask fraction raw {:.3}, closed {:.3}, refined {:.3}",
        frac(&raw),
        frac(&stages.closed),
        frac(&stages.refined)
    );

    o.save_png16(format!("{out}/opacity.png"))?;
    raw.save_png(format!("{out}/mask_raw.png"))?;
    stages.closed.save_png(format!("{out}/mask_closed.png"))?;
    stages.refined.save_png(format!("{out}/mask_refined.png"))?;
    Ok(())
}
