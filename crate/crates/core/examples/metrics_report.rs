//! Image, depth and distribution metrics on small synthetic inputs.
//!
//! cargo run --example metrics_report

use gsrefine::metrics::{
    depth_metrics, embeddings_from_rows, fit_embedding_gaussian, frechet_distance, met3r_sequence,
    psnr, ssim, DepthAlign,
};
use gsrefine::scene::{DepthMap, ViewImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> gsrefine::Result<()> {
    let gt = ViewImage::from_fn(64, 64, |x, y| {
        let v = 0.5 + 0.4 * ((x as f32) * 0.2).sin() * ((y as f32) * 0.15).cos();
        [v, 0.6 * v, 1.0 - v]
    });
    let noisy = {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0f32, 0.03).unwrap();
        ViewImage::from_fn(64, 64, |x, y| {
            gt.get(x, y)
                .map(|c| (c + n.sample(&mut rng)).clamp(0.0, 1.0))
        })
    };
    println!("psnr(gt, gt) = {}", psnr(&gt, &gt, 1.0)?);
    println!(
        "psnr(noisy, gt) = {:.2} dB, ssim = {:.4}",
        psnr(&noisy, &gt, 1.0)?,
        ssim(&noisy, &gt)?
    );

    let gt_depth = DepthMap::from_values(
        32,
        32,
        (0..1024).map(|i| 1.0 + (i % 32) as f32 * 0.1).collect(),
    )?;
    let doubled =
        DepthMap::from_values(32, 32, gt_depth.values().iter().map(|d| 2.0 * d).collect())?;
    for align in [DepthAlign::None, DepthAlign::Median] {
        let r = depth_metrics(&doubled, &gt_depth, align)?;
        println!(
            "pred = 2 gt, {align:?}: abs_rel {:.3} rmse {:.3} delta<1.25 {:.3}",
            r.abs_rel, r.rmse, r.delta125
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = Normal::new(0.0f32, 1.0).unwrap();
    let a: Vec<f32> = (0..2000 * 4).map(|_| n.sample(&mut rng)).collect();
    let b: Vec<f32> = (0..2000 * 4)
        .map(|_| n.sample(&mut rng) * 1.5 + 0.5)
        .collect();
    let (m1, s1) = fit_embedding_gaussian(&embeddings_from_rows(2000, 4, &a)?)?;
    let (m2, s2) = fit_embedding_gaussian(&embeddings_from_rows(2000, 4, &b)?)?;
    println!(
        "frechet distance between the two clouds {:.4}",
        frechet_distance(&m1, &s1, &m2, &s2)?
    );
    println!(
        "met3r over a sequence {:.4}",
        met3r_sequence(&[0.12, 0.2, 0.18, 0.3])?
    );
    Ok(())
}
