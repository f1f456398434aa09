mod common;

use common::{frame_camera, max_channel_diff, random_scene};
use gsrefine::render::{
    project_gaussian, render, render_oracle, CullReason, Projection, RenderOptions,
};
use gsrefine::scene::{CameraPose, GaussianPrimitive, GaussianScene};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn isotropic_unit_gaussian_on_axis_matches_the_jacobian_closed_form() {
    let cam = CameraPose::looking_down_z(64, 64, 50.0);
    for z in [2.0, 5.0, 11.0] {
        let g = GaussianPrimitive::isotropic([0.0, 0.0, z], 1.0, 0.5, [1.0; 3]);
        let Projection::Visible(p) = project_gaussian(&g, 0, &cam, &RenderOptions::default())
        else {
            panic!("on-axis gaussian culled")
        };
        let want = (50.0 / z).powi(2) + 0.3;
        assert!((p.cov2d[(0, 0)] - want).abs() < 1e-9 * want);
        assert!((p.cov2d[(1, 1)] - want).abs() < 1e-9 * want);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
        assert_eq!((p.mean2d.x, p.mean2d.y), (cam.cx, cam.cy));
        assert_eq!(p.view_depth, z);
    }
}

#[test]
fn off_axis_covariance_matches_a_hand_built_jacobian() {
    let cam = CameraPose::looking_down_z(64, 48, 40.0);
    let g = GaussianPrimitive::from_wxyz(
        [0.4, -0.3, 3.0],
        [0.2, 0.1, 0.3],
        [0.9, 0.2, -0.1, 0.3],
        0.8,
        [0.5; 3],
    )
    .unwrap();
    let Projection::Visible(p) = project_gaussian(&g, 0, &cam, &RenderOptions::default()) else {
        panic!()
    };
    let (x, y, z) = (0.4, -0.3, 3.0);
    let f = 40.0;
    let j = nalgebra::Matrix2x3::new(f / z, 0.0, -f * x / (z * z), 0.0, f / z, -f * y / (z * z));
    let r = g.rotation.to_rotation_matrix();
    let s = nalgebra::Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let want = j * (r * s * r.transpose()) * j.transpose() + nalgebra::Matrix2::identity() * 0.3;
    assert!((p.cov2d - want).abs().max() < 1e-12);
}

#[test]
fn culling_reasons() {
    let cam = frame_camera();
    let opts = RenderOptions::default();
    let behind = GaussianPrimitive::isotropic([0.0, 0.0, -1.0], 0.1, 0.5, [1.0; 3]);
    assert_eq!(
        project_gaussian(&behind, 0, &cam, &opts),
        Projection::Culled(CullReason::Near)
    );
    let at_near = GaussianPrimitive::isotropic([0.0, 0.0, 0.01], 0.1, 0.5, [1.0; 3]);
    assert_eq!(
        project_gaussian(&at_near, 0, &cam, &opts),
        Projection::Culled(CullReason::Near)
    );
    let far_left = GaussianPrimitive::isotropic([-50.0, 0.0, 2.0], 0.01, 0.5, [1.0; 3]);
    assert_eq!(
        project_gaussian(&far_left, 0, &cam, &opts),
        Projection::Culled(CullReason::OffScreen)
    );
    let flat = RenderOptions {
        low_pass: 0.0,
        ..opts
    };
    let sliver = GaussianPrimitive::from_wxyz(
        [0.0, 0.0, 2.0],
        [1e-200, 1e-200, 1e-200],
        [1.0, 0.0, 0.0, 0.0],
        0.5,
        [1.0; 3],
    )
    .unwrap();
    assert_eq!(
        project_gaussian(&sliver, 0, &cam, &flat),
        Projection::Culled(CullReason::Degenerate)
    );
}

#[test]
fn empty_scene_is_background_everywhere() {
    let opts = RenderOptions {
        background: [0.2, 0.4, 0.6],
        ..RenderOptions::default()
    };
    let out = render(&GaussianScene::default(), &frame_camera(), &opts);
    assert!(out.alpha.values().iter().all(|&a| a == 0.0));
    assert!(out.transmittance.values().iter().all(|&a| a == 0.0));
    assert!(out.color.pixels().iter().all(|p| *p == [0.2, 0.4, 0.6]));
    let mask = gsrefine::mask::opacity_mask(&out.transmittance, 0.01).unwrap();
    assert_eq!(mask.count(), 64 * 64);
}

#[test]
fn opaque_gaussian_at_its_mean_hits_the_clamp() {
    let cam = frame_camera();
    let opts = RenderOptions {
        background: [1.0, 0.0, 0.0],
        ..RenderOptions::default()
    };
    let g = GaussianPrimitive::isotropic([0.0, 0.0, 2.0], 0.1, 1.0, [0.0, 1.0, 0.0]);
    let out = render(&GaussianScene::new("one", vec![g]), &cam, &opts);
    let (x, y) = (cam.cx as usize, cam.cy as usize);
    let c = out.color.get(x, y);
    assert!((c[0] - 0.01).abs() < 1e-6 && (c[1] - 0.99).abs() < 1e-6 && c[2].abs() < 1e-6);
    assert!((out.transmittance.get(x, y) - 0.99).abs() < 1e-6);
    assert!((out.depth.get(x, y) - 2.0).abs() < 1e-6);
}

#[test]
fn two_half_transparent_gaussians_composite_in_closed_form() {
    let cam = frame_camera();
    let bg = [0.1, 0.2, 0.3];
    let opts = RenderOptions {
        background: bg,
        ..RenderOptions::default()
    };
    let (c1, c2) = ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
    // listed far first so the result also exercises the sort
    let scene = GaussianScene::new(
        "pair",
        vec![
            GaussianPrimitive::isotropic([0.0, 0.0, 4.0], 0.1, 0.5, c2),
            GaussianPrimitive::isotropic([0.0, 0.0, 2.0], 0.1, 0.5, c1),
        ],
    );
    let out = render(&scene, &cam, &opts);
    let (x, y) = (cam.cx as usize, cam.cy as usize);
    let c = out.color.get(x, y);
    for k in 0..3 {
        let want = 0.5 * c1[k] + 0.25 * c2[k] + 0.25 * bg[k] as f64;
        assert!((c[k] as f64 - want).abs() < 1e-6);
    }
    assert!((out.transmittance.get(x, y) - 0.75).abs() < 1e-6);
    let d = (0.5 * 2.0 + 0.25 * 4.0) / 0.75;
    assert!((out.depth.get(x, y) as f64 - d).abs() < 1e-5);
}

#[test]
fn equal_depth_ties_follow_primitive_index() {
    let cam = frame_camera();
    let a = GaussianPrimitive::isotropic([0.0, 0.0, 3.0], 0.2, 0.6, [1.0, 0.0, 0.0]);
    let b = GaussianPrimitive::isotropic([0.0, 0.0, 3.0], 0.2, 0.6, [0.0, 1.0, 0.0]);
    let ab = render(
        &GaussianScene::new("ab", vec![a.clone(), b.clone()]),
        &cam,
        &RenderOptions::default(),
    );
    let ba = render(
        &GaussianScene::new("ba", vec![b, a]),
        &cam,
        &RenderOptions::default(),
    );
    let p = ab.color.get(32, 32);
    assert!(p[0] > p[1]);
    assert_ne!(ab.color, ba.color);
    assert_eq!(ab.transmittance, ba.transmittance);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiled_equals_oracle(seed in any::<u64>(), exact in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 64);
        let opts = if exact { RenderOptions::exact() } else { RenderOptions::default() };
        let a = render(&scene, &frame_camera(), &opts);
        let b = render_oracle(&scene, &frame_camera(), &opts);
        prop_assert!(max_channel_diff(a.color.pixels(), b.color.pixels()) <= 1e-5);
        for (x, y) in a.alpha.values().iter().zip(b.alpha.values()) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
        prop_assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn weights_and_residual_sum_to_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 64);
        let stop = render(&scene, &frame_camera(), &RenderOptions::default());
        for (a, r) in stop.alpha.values().iter().zip(stop.residual.values()) {
            prop_assert!((a + r - 1.0).abs() <= 1e-3);
        }
        let full = render(&scene, &frame_camera(), &RenderOptions::exact());
        for (a, r) in full.alpha.values().iter().zip(full.residual.values()) {
            prop_assert!((a + r - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn permutations_with_distinct_depths_are_bit_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 32);
        let mut shuffled = scene.primitives.clone();
        shuffled.shuffle(&mut rng);
        let a = render(&scene, &frame_camera(), &RenderOptions::default());
        let b = render(&GaussianScene::new("shuffled", shuffled), &frame_camera(), &RenderOptions::default());
        prop_assert_eq!(a.color, b.color);
        prop_assert_eq!(a.depth, b.depth);
        prop_assert_eq!(a.transmittance, b.transmittance);
    }

    #[test]
    fn tile_size_does_not_change_the_image(seed in any::<u64>(), tile in prop::sample::select(vec![1usize, 7, 8, 32, 64])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 32);
        let a = render(&scene, &frame_camera(), &RenderOptions::default());
        let b = render(&scene, &frame_camera(), &RenderOptions { tile_size: tile, ..RenderOptions::default() });
        prop_assert_eq!(a, b);
    }

    #[test]
    fn outputs_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 64);
        let out = render(&scene, &frame_camera(), &RenderOptions { background: [1.0; 3], ..RenderOptions::default() });
        prop_assert!(out.color.pixels().iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!(out.transmittance.values().iter().all(|o| (0.0..=1.0).contains(o)));
        prop_assert!(out.depth.values().iter().all(|d| d.is_finite() && *d >= 0.0));
    }
}
