//! The full refine and level-up loop on the synthetic two-view fixture with
//! in-process stub backends. Inspect `<out_dir>/run/manifest.json` afterwards.
//!
//! cargo run --release --example fixture_run -- [out_dir]

use std::path::PathBuf;

use gsrefine::pipeline::{fixture, run_alg1, PipelineConfig};

fn main() -> gsrefine::Result<()> {
    let root = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/fixture_run".into()),
    );
    let config_path = fixture::write_fixture(&root.join("inputs"))?;
    println!("fixture config at {}", config_path.display());
    let cfg = PipelineConfig::load(&config_path)?;

    let t = std::time::Instant::now();
    let outcome = run_alg1(&cfg, &root.join("run"))?;
    let m = &outcome.manifest;
    println!(
        "finished in {:?} with exit code {}",
        t.elapsed(),
        outcome.exit_code()
    );
    for v in &m.extrapolated {
        println!(
            "view {} {:?}: mean opacity {:.4}, mask fraction {:.3}",
            v.index, v.status, v.mean_opacity, v.mask_fraction
        );
    }
    println!("dispatch order {:?}", m.h_order);
    if let Some(e) = &m.eval {
        for (b, a) in e.mean_opacity_before.iter().zip(&e.mean_opacity_after) {
            println!("opacity {b:.4} -> {a:.4}");
        }
        for i in &e.inputs {
            println!("input {} psnr {:?} ssim {:?}", i.index, i.psnr, i.ssim);
        }
    }
    Ok(())
}
