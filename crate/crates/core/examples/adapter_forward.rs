//! Toy-width adapter: geometry fusion at init, the four-level pyramid, and
//! injection into stand-in encoder features.
//!
//! cargo run --release --example adapter_forward -- [out_dir]

use gsrefine::adapter::ops::image_to_chw;
use gsrefine::adapter::{inject, AdapterConfig, FeaturePyramid, LevelingAdapter, PATCH_RESOLUTION};
use gsrefine::scene::{TokenGrid, ViewImage, PATCH_SIZE, TOKEN_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gsrefine::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/adapter_forward".into());
    std::fs::create_dir_all(&out).expect("create output dir");

    let adapter = LevelingAdapter::new(AdapterConfig::toy(), 11)?;
    println!(
        "toy adapter with {} parameters",
        adapter.weights.parameter_count()
    );

    let image = ViewImage::from_fn(PATCH_RESOLUTION, PATCH_RESOLUTION, |x, y| {
        let (u, v) = (x as f32 / 447.0, y as f32 / 447.0);
        [u, v, 0.5 * (u + v)]
    });
    let side = PATCH_RESOLUTION / PATCH_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = (0..side * side * TOKEN_DIM)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let tokens = TokenGrid::from_data(side, side, TOKEN_DIM, data)?;

    let result = adapter.forward(&image, &tokens)?;
    let identity = result.fused == image_to_chw(&image);
    println!("fused condition equals the input at init: {identity}");
    println!(
        "pyramid sizes {:?}, channels {:?}",
        result.pyramid.spatial_sizes(),
        result.pyramid.channels()
    );

    let encoder: FeaturePyramid = result.pyramid.zeros_like();
    let injected = inject(&encoder, &result.pyramid)?;
    println!("injected level-1 sum {:.6}", injected.levels[0].sum());

    result.pyramid.save(format!("{out}/pyramid.bin"))?;
    adapter.weights.save(format!("{out}/weights.bin"))?;
    println!("wrote {out}/pyramid.bin and {out}/weights.bin");
    Ok(())
}
