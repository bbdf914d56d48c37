mod common;

use iid_core::image::Image;
use iid_core::losses::*;
use iid_core::metrics;
use iid_core::tensor::{Tape, Tensor};
use iid_core::trainer::tensor_to_image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use common::*;

#[test]
fn pixel_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = unit(&mut rng, &[2, 3, 8, 8]);
    assert_eq!(pixel(&g, &g), 0.0);

    let doubled = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let mse: f64 = g.data().iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
    assert!((pixel(&doubled, &g) - 0.05 * mse).abs() < 1e-15);

    for _ in 0..5 {
        let p = unit(&mut rng, &[3, 3, 8, 8]);
        let g = unit(&mut rng, &[3, 3, 8, 8]);
        assert!((pixel(&p, &g) - pixel_oracle(&p, &g)).abs() < 1e-12);
    }

    let zero = Tensor::zeros(&[1, 1, 4, 4]);
    let g = unit(&mut rng, &[1, 1, 4, 4]);
    let mean_sq = g.data().iter().map(|v| v * v).sum::<f64>() / 16.0;
    assert!((pixel(&zero, &g) - mean_sq).abs() < 1e-15);
}

#[test]
fn dssim_loss_matches_the_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = unit(&mut rng, &[3, 3, 16, 16]);
    let g = unit(&mut rng, &[3, 3, 16, 16]);
    let loss = eval2(|t, a, b| dssim_loss(t, a, b).unwrap(), &p, &g);
    let metric: f64 = (0..3)
        .map(|b| metrics::dssim(&tensor_to_image(&p, b).unwrap(), &tensor_to_image(&g, b).unwrap()).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((loss - metric).abs() < 1e-12);
    assert_eq!(eval2(|t, a, b| dssim_loss(t, a, b).unwrap(), &g, &g), 0.0);

    let img = Image::from_fn(16, 16, 1, |r, c, _| if (r / 4 + c / 4) % 2 == 0 { 0.95 } else { 0.05 }).unwrap();
    let gt = Tensor::new(vec![1, 1, 16, 16], img.plane(0)).unwrap();
    let inv = Tensor::new(vec![1, 1, 16, 16], img.plane(0).iter().map(|v| 1.0 - v).collect()).unwrap();
    let v = eval2(|t, a, b| dssim_loss(t, a, b).unwrap(), &inv, &gt);
    assert!(v > 0.0 && v <= 1.0, "{v}");
}

#[test]
fn perceptual_loss_properties() {
    let ext = PerceptualExtractor::new(7);
    assert_eq!(ext.stages(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = unit(&mut rng, &[2, 3, 32, 32]);
    let p = unit(&mut rng, &[2, 3, 32, 32]);
    let l = |p: &Tensor, g: &Tensor| eval2(|t, a, b| perceptual_loss(t, a, b, &ext).unwrap(), p, g);
    let scale = |t: &Tensor, c: f64| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| c * v).collect()).unwrap();
    assert_eq!(l(&g, &g), 0.0);
    assert!(l(&p, &g) > 0.0);

    // Zero biases and ReLU make the features positively homogeneous.
    for c in [0.5, 2.0, 3.0] {
        assert!((l(&scale(&p, c), &scale(&g, c)) - c * l(&p, &g)).abs() < 1e-12);
    }
    let mut last = 0.0;
    for c in [1.2, 1.5, 2.0, 3.0] {
        let v = l(&scale(&g, c), &g);
        assert!(v > last, "{c}: {v} <= {last}");
        last = v;
    }
    let gray = unit(&mut rng, &[1, 1, 32, 32]);
    let mut tape = Tape::new();
    let a = tape.constant(gray.clone());
    let b = tape.constant(gray);
    assert!(perceptual_loss(&mut tape, a, b, &ext).is_err());
}

#[test]
fn edge_loss_is_the_sum_of_six_terms() {
    let f = fixture(4, false);
    let mut tape = Tape::new();
    let b = bundle(&mut tape, &f.outputs, true);
    let total = edge_loss(&mut tape, &b, &f.targets, &LossWeights::default()).unwrap().unwrap();
    let gts = [
        &f.targets.reflectance_edges[0],
        &f.targets.reflectance_edges[1],
        &f.targets.reflectance_edges[2],
        &f.targets.shading_edges[0],
        &f.targets.shading_edges[1],
        &f.targets.shading_edges[2],
    ];
    let sum: f64 = (0..6).map(|i| pixel(&f.outputs[i], gts[i])).sum();
    assert!((tape.value(total).item().unwrap() - sum).abs() < 1e-12);

    // Only the full-scale reflectance edge wrong: the loss is that term alone.
    let mut almost = fixture(4, true);
    almost.outputs[0] = f.outputs[0].clone();
    let mut tape = Tape::new();
    let b = bundle(&mut tape, &almost.outputs, true);
    let total = edge_loss(&mut tape, &b, &almost.targets, &LossWeights::default()).unwrap().unwrap();
    assert!((tape.value(total).item().unwrap() - pixel(&f.outputs[0], gts[0])).abs() < 1e-15);

    let mut tape = Tape::new();
    let b = bundle(&mut tape, &f.outputs, false);
    assert!(edge_loss(&mut tape, &b, &f.targets, &LossWeights::default()).unwrap().is_none());
}

#[test]
fn total_loss_recombines_from_independent_terms() {
    let f = fixture(5, false);
    let w = LossWeights::default();
    let bd = breakdown_for(&f, &w, true);
    assert!((bd.total - bd.recombine(&w)).abs() < 1e-12);

    let [edge, unrefined, refined, rec, dssim, perc, hand] = hand_terms(&f);
    assert!((bd.total - hand).abs() < 1e-12);
    for (got, want) in [(bd.edge, edge), (bd.unrefined, unrefined), (bd.refined, refined), (bd.reconstruction, rec), (bd.dssim, dssim), (bd.perceptual, perc)] {
        assert!((got - want).abs() < 1e-12);
    }

    let no_perc = LossWeights { lambda_p: 0.0, ..w };
    let bd0 = breakdown_for(&f, &no_perc, true);
    assert!((bd0.total - (hand - 0.05 * perc)).abs() < 1e-12);
}

#[test]
fn perfect_bundle_costs_nothing() {
    let f = fixture(6, true);
    let bd = breakdown_for(&f, &LossWeights::default(), true);
    for (name, v) in bd.terms() {
        assert!(v.abs() < 1e-15, "{name} = {v}");
    }
}

#[test]
fn weights_reject_negatives() {
    assert!(LossWeights { lambda_e: -0.1, ..LossWeights::default() }.validate().is_err());
    let w = LossWeights::default();
    assert_eq!((w.lambda_u, w.lambda_e, w.lambda_d, w.lambda_p), (0.5, 0.4, 0.4, 0.05));
    assert_eq!((w.lambda_smse, w.lambda_mse), (0.95, 0.05));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smse_term_vanishes_for_scaled_targets(seed in 0u64..10_000, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = unit(&mut rng, &[1, 3, 6, 6]);
        let p = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| c * v).collect()).unwrap();
        let s = eval2(|t, a, b| smse_loss(t, a, b).unwrap(), &p, &g);
        prop_assert!(s.abs() < 1e-24);
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = unit(&mut rng, &[2, 3, 12, 12]);
        let g = unit(&mut rng, &[2, 3, 12, 12]);
        prop_assert!(pixel(&p, &g) > 0.0);
        prop_assert!(eval2(|t, a, b| dssim_loss(t, a, b).unwrap(), &p, &g) > 0.0);
    }
}
