mod common;

use iid_core::image::Image;
use iid_core::metrics::*;
use iid_core::synth::{generate_scene_with_layout, SceneSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use common::*;

#[test]
fn metrics_match_brute_force_oracles() {
    for (i, (p, g)) in pairs().iter().enumerate() {
        assert!((mse(p, g).unwrap() - oracle_mse(p, g)).abs() < 1e-10, "mse pair {i}");
        assert!((smse(p, g).unwrap() - oracle_smse(&all_values(p), &all_values(g))).abs() < 1e-10, "smse pair {i}");
        assert!((lmse_default(p, g).unwrap() - oracle_lmse(p, g, 20, 10)).abs() < 1e-10, "lmse pair {i}");
        assert!((dssim(p, g).unwrap() - (1.0 - oracle_ssim(p, g)) / 2.0).abs() < 1e-10, "dssim pair {i}");
        let judgments = synth_judgments(g, 200, i as u64, WHDR_DELTA).unwrap();
        assert!((whdr(p, &judgments, WHDR_DELTA).unwrap() - oracle_whdr(p, &judgments)).abs() < 1e-10, "whdr pair {i}");
    }
}

#[test]
fn smse_ignores_global_scale() {
    for (p, g) in pairs() {
        let base = smse(&p, &g).unwrap();
        for c in [0.1, 2.0, 10.0] {
            assert!((smse(&p.scaled(c), &g).unwrap() - base).abs() < 1e-12);
        }
        assert!((mse(&p.scaled(2.0), &g).unwrap() - mse(&p, &g).unwrap()).abs() > 1e-3);
    }
}

#[test]
fn constant_offset_and_orthogonal_cases() {
    let g = Image::from_fn(24, 24, 3, |r, c, k| 0.2 + 0.01 * ((r + c + k) % 7) as f64).unwrap();
    let shifted = g.map(|v| v + 0.1).unwrap();
    assert!((mse(&shifted, &g).unwrap() - 0.01).abs() < 1e-12);
    assert_eq!(mse(&g, &g).unwrap(), 0.0);
    assert!(smse(&g.scaled(3.0), &g).unwrap() < 1e-24);

    let a = Image::from_fn(1, 2, 1, |_, c, _| if c == 0 { 1.0 } else { 0.0 }).unwrap();
    let b = Image::from_fn(1, 2, 1, |_, c, _| if c == 1 { 0.5 } else { 0.0 }).unwrap();
    assert!((smse(&a, &b).unwrap() - 0.125).abs() < 1e-15);
}

#[test]
fn quadrant_scaling_is_local() {
    // Ground truth lives only in the four 10x10 corners of a 40x40 image, so
    // every 20x20 window at stride 10 sees at most one corner.
    let size = 40;
    let corner = |r: usize, c: usize| (r < 10 || r >= 30) && (c < 10 || c >= 30);
    let g = Image::from_fn(size, size, 3, |r, c, k| if corner(r, c) { 0.2 + 0.05 * ((r * 3 + c + k) % 9) as f64 } else { 0.0 })
        .unwrap();
    let p = Image::from_fn(size, size, 3, |r, c, k| {
        let v = g.get(r, c, k);
        if r < 20 && c < 20 { 2.0 * v } else { v }
    })
    .unwrap();
    let local = lmse_default(&p, &g).unwrap();
    let global = smse(&p, &g).unwrap();
    assert!((local - oracle_lmse(&p, &g, 20, 10)).abs() < 1e-15);
    assert!(local.abs() < 1e-15, "lmse {local}");
    assert!(global > 1e-4, "smse {global}");
    assert!((global - oracle_smse(&all_values(&p), &all_values(&g))).abs() < 1e-12);
}

#[test]
fn constant_images_follow_the_single_window_formula() {
    let (a, b) = (0.3, 0.7);
    let p = Image::filled(16, 16, 1, a).unwrap();
    let g = Image::filled(16, 16, 1, b).unwrap();
    let c1 = 0.01f64.powi(2);
    let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert!((ssim(&p, &g).unwrap() - expected).abs() < 1e-12);
    assert!((dssim(&p, &g).unwrap() - (1.0 - expected) / 2.0).abs() < 1e-12);
    assert_eq!(dssim(&g, &g).unwrap(), 0.0);
}

#[test]
fn size_and_shape_errors() {
    let small = Image::filled(10, 10, 3, 0.5).unwrap();
    assert!(lmse_default(&small, &small).is_err());
    assert!(ssim(&small, &small).is_err());
    let other = Image::filled(10, 10, 1, 0.5).unwrap();
    assert!(mse(&small, &other).is_err());
    assert!(whdr(&small, &[], WHDR_DELTA).is_err());
}

#[test]
fn whdr_self_consistency_and_flips() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_image(&mut rng, 32, 32, 3);
    let judgments = synth_judgments(&g, 300, 4, WHDR_DELTA).unwrap();
    assert_eq!(judgments, synth_judgments(&g, 300, 4, WHDR_DELTA).unwrap());
    assert_eq!(whdr(&g, &judgments, WHDR_DELTA).unwrap(), 0.0);
    let flipped: Vec<OrdinalJudgment> = judgments
        .iter()
        .map(|j| OrdinalJudgment {
            label: match j.label {
                OrdinalLabel::ADarker => OrdinalLabel::BDarker,
                OrdinalLabel::BDarker => OrdinalLabel::ADarker,
                OrdinalLabel::Equal => OrdinalLabel::ADarker,
            },
            ..j.clone()
        })
        .collect();
    assert_eq!(whdr(&g, &flipped, WHDR_DELTA).unwrap(), 1.0);
}

#[test]
fn judgments_inside_one_patch_are_equal() {
    let scene = generate_scene_with_layout(&SceneSpec { seed: 3, size: 48, n_patches: 3, ..SceneSpec::default() }).unwrap();
    let gt = &scene.triple.reflectance;
    let labels = &scene.layout.patch_ids;
    let judgments = synth_judgments(gt, 500, 1, WHDR_DELTA).unwrap();
    let w = gt.width();
    let same: Vec<_> = judgments
        .iter()
        .filter(|j| labels[j.point_a.0 * w + j.point_a.1] == labels[j.point_b.0 * w + j.point_b.1])
        .collect();
    assert!(!same.is_empty());
    assert!(same.iter().all(|j| j.label == OrdinalLabel::Equal));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smse_scale_invariance_holds(seed in 0u64..10_000, c in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_image(&mut rng, 8, 8, 3);
        let g = random_image(&mut rng, 8, 8, 3);
        prop_assert!((smse(&p.scaled(c), &g).unwrap() - smse(&p, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn whdr_ignores_positive_scaling(seed in 0u64..10_000, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_image(&mut rng, 16, 16, 3);
        let g = random_image(&mut rng, 16, 16, 3);
        let j = synth_judgments(&g, 64, seed, WHDR_DELTA).unwrap();
        let base = whdr(&p, &j, WHDR_DELTA).unwrap();
        // Scaling leaves ratios intact up to rounding at the tolerance edges.
        let scaled = whdr(&p.scaled(c), &j, WHDR_DELTA).unwrap();
        prop_assert!((scaled - base).abs() <= 1.0 / 64.0 + 1e-12);
    }

    #[test]
    fn metrics_are_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_image(&mut rng, 24, 24, 3);
        let g = random_image(&mut rng, 24, 24, 3);
        let m = ComponentMetrics::compute(&p, &g).unwrap();
        prop_assert!(m.mse >= 0.0 && m.smse >= 0.0 && m.lmse >= 0.0);
        prop_assert!((0.0..=1.0).contains(&m.dssim));
    }
}
