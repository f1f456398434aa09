//! Palette scores of synthetic training pairs and which survive each preset threshold.
//!
//! cargo run --example palette_filter

use gsrefine::mask::BinaryMask;
use gsrefine::palette::{filter_dataset, score_pairs, ETA_P_PRESETS};
use gsrefine::scene::ViewImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

fn main() -> gsrefine::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (64, 64);
    let mask = BinaryMask::from_fn(w, h, |x, y| (16..48).contains(&x) && (8..56).contains(&y));

    let gray = |v: f32| [v, v, v];
    let normal = Normal::new(0.5f32, 0.1).unwrap();
    let uniform = Uniform::new(0.0f32, 1.0).unwrap();
    let mut pairs = Vec::new();
    let smooth = ViewImage::from_fn(w, h, |_, _| gray(normal.sample(&mut rng).clamp(0.0, 1.0)));
    pairs.push(("gaussian-noise".to_string(), smooth, mask.clone()));
    let flat = ViewImage::from_fn(w, h, |_, _| gray(uniform.sample(&mut rng)));
    pairs.push(("uniform-noise".to_string(), flat, mask.clone()));
    let two_tone = ViewImage::from_fn(w, h, |x, _| gray(if x % 2 == 0 { 0.1 } else { 0.9 }));
    pairs.push(("two-tone".to_string(), two_tone, mask.clone()));
    let outlier = ViewImage::from_fn(w, h, |x, y| gray(if x == 20 && y < 12 { 1.0 } else { 0.4 }));
    pairs.push(("sparse-outliers".to_string(), outlier, mask));

    let records = score_pairs(&pairs)?;
    for r in &records {
        println!(
            "{:<16} score {:.4}  mean {:.3}  std {:.3}",
            r.pair_id, r.score, r.mean, r.std
        );
    }
    for eta in ETA_P_PRESETS {
        println!("eta_p {eta}: keep {:?}", filter_dataset(&records, eta));
    }
    Ok(())
}
