//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use iid_core::image::Image;
use iid_core::losses::*;
use iid_core::metrics::{OrdinalJudgment, OrdinalLabel};
use iid_core::network::{ForwardBundle, LayerKind, LayerSpec};
use iid_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image {
    Image::from_fn(h, w, ch, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

pub fn pairs() -> Vec<(Image, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..20).map(|_| (random_image(&mut rng, 64, 64, 3), random_image(&mut rng, 64, 64, 3))).collect()
}

pub fn oracle_mse(p: &Image, g: &Image) -> f64 {
    let mut acc = 0.0;
    for r in 0..p.height() {
        for c in 0..p.width() {
            for k in 0..p.channels() {
                acc += (p.get(r, c, k) - g.get(r, c, k)).powi(2);
            }
        }
    }
    acc / (p.height() * p.width() * p.channels()) as f64
}

pub fn oracle_smse(p: &[f64], g: &[f64]) -> f64 {
    let (mut pg, mut pp) = (0.0, 0.0);
    for i in 0..p.len() {
        pg += p[i] * g[i];
        pp += p[i] * p[i];
    }
    let a = if pp == 0.0 { 0.0 } else { pg / pp };
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += (a * p[i] - g[i]).powi(2);
    }
    acc / p.len() as f64
}

pub fn all_values(img: &Image) -> Vec<f64> {
    let mut v = Vec::new();
    for r in 0..img.height() {
        for c in 0..img.width() {
            for k in 0..img.channels() {
                v.push(img.get(r, c, k));
            }
        }
    }
    v
}

pub fn oracle_lmse(p: &Image, g: &Image, window: usize, stride: usize) -> f64 {
    let origins = |n: usize| {
        let mut v = Vec::new();
        let mut s = 0;
        while s + window <= n {
            v.push(s);
            s += stride;
        }
        if !v.contains(&(n - window)) {
            v.push(n - window);
        }
        v
    };
    let mut per_channel = 0.0;
    for k in 0..p.channels() {
        let (mut acc, mut count) = (0.0, 0);
        for &r in &origins(p.height()) {
            for &c in &origins(p.width()) {
                let mut bp = Vec::new();
                let mut bg = Vec::new();
                for y in r..r + window {
                    for x in c..c + window {
                        bp.push(p.get(y, x, k));
                        bg.push(g.get(y, x, k));
                    }
                }
                acc += oracle_smse(&bp, &bg);
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / p.channels() as f64
}

// Direct 2-D weighted sums at every window position.
pub fn oracle_ssim(p: &Image, g: &Image) -> f64 {
    let n = 11;
    let sigma: f64 = 1.5;
    let mut w2 = vec![0.0; n * n];
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            w2[i * n + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            s += w2[i * n + j];
        }
    }
    w2.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for k in 0..p.channels() {
        let (mut acc, mut count) = (0.0, 0);
        for r in 0..=p.height() - n {
            for c in 0..=p.width() - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = w2[i * n + j];
                        let (x, y) = (p.get(r + i, c + j, k), g.get(r + i, c + j, k));
                        mx += wt * x;
                        my += wt * y;
                        xx += wt * x * x;
                        yy += wt * y * y;
                        xy += wt * x * y;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / p.channels() as f64
}

pub fn oracle_whdr(p: &Image, judgments: &[OrdinalJudgment]) -> f64 {
    let light = |(r, c): (usize, usize)| ((p.get(r, c, 0) + p.get(r, c, 1) + p.get(r, c, 2)) / 3.0).max(1e-6);
    let (mut wrong, mut total) = (0.0, 0.0);
    for j in judgments {
        let ratio = light(j.point_a) / light(j.point_b);
        let label = if ratio >= 1.0 / 1.1 && ratio <= 1.1 {
            OrdinalLabel::Equal
        } else if ratio < 1.0 {
            OrdinalLabel::ADarker
        } else {
            OrdinalLabel::BDarker
        };
        if label != j.label {
            wrong += j.weight;
        }
        total += j.weight;
    }
    wrong / total
}

pub type Row = (&'static str, LayerKind, usize, usize, usize, usize, usize, usize, bool);

pub const C: LayerKind = LayerKind::Conv;
pub const D: LayerKind = LayerKind::Deconv;

// Default configuration: 32 px, base 8, three halvings. Channels per level
// are 8, 16, 32, 64. Columns: name, kind, in, out, kernel, stride, pad,
// output size, batch norm.
#[rustfmt::skip]
pub const SCALED_TABLE: &[Row] = &[
    ("img_enc.l0.c0", C, 3, 8, 3, 1, 1, 32, true),
    ("img_enc.l0.c1", C, 8, 8, 3, 1, 1, 32, true),
    ("img_enc.l1.c0", C, 8, 8, 3, 2, 1, 16, true),
    ("img_enc.l1.c1", C, 8, 16, 3, 1, 1, 16, true),
    ("img_enc.l2.c0", C, 16, 16, 3, 2, 1, 8, true),
    ("img_enc.l2.c1", C, 16, 32, 3, 1, 1, 8, true),
    ("img_enc.l3.c0", C, 32, 32, 3, 2, 1, 4, true),
    ("img_enc.l3.c1", C, 32, 64, 3, 1, 1, 4, true),
    ("ccr_enc.l0.c0", C, 6, 8, 3, 1, 1, 32, true),
    ("ccr_enc.l0.c1", C, 8, 8, 3, 1, 1, 32, true),
    ("ccr_enc.l1.c0", C, 8, 8, 3, 2, 1, 16, true),
    ("ccr_enc.l1.c1", C, 8, 16, 3, 1, 1, 16, true),
    ("ccr_enc.l2.c0", C, 16, 16, 3, 2, 1, 8, true),
    ("ccr_enc.l2.c1", C, 16, 32, 3, 1, 1, 8, true),
    ("ccr_enc.l3.c0", C, 32, 32, 3, 2, 1, 4, true),
    ("ccr_enc.l3.c1", C, 32, 64, 3, 1, 1, 4, true),
    ("edge_r.up1", D, 128, 64, 4, 2, 1, 8, true),
    ("edge_r.up2", D, 192, 32, 4, 2, 1, 16, true),
    ("edge_r.up3", D, 96, 16, 4, 2, 1, 32, true),
    ("edge_r.fuse", C, 48, 8, 3, 1, 1, 32, true),
    ("edge_r.out", C, 8, 3, 3, 1, 1, 32, false),
    ("edge_s.up1", D, 128, 64, 4, 2, 1, 8, true),
    ("edge_s.up2", D, 192, 32, 4, 2, 1, 16, true),
    ("edge_s.up3", D, 96, 16, 4, 2, 1, 32, true),
    ("edge_s.fuse", C, 48, 8, 3, 1, 1, 32, true),
    ("edge_s.out", C, 8, 3, 3, 1, 1, 32, false),
    ("side.quarter", C, 64, 3, 3, 1, 1, 8, false),
    ("side.half", C, 32, 3, 3, 1, 1, 16, false),
    ("unref_r.up1", D, 64, 64, 4, 2, 1, 8, true),
    ("unref_r.up2", D, 160, 32, 4, 2, 1, 16, true),
    ("unref_r.up3", D, 80, 16, 4, 2, 1, 32, true),
    ("unref_r.fuse", C, 40, 8, 3, 1, 1, 32, true),
    ("unref_r.out", C, 8, 3, 3, 1, 1, 32, false),
    ("unref_s.up1", D, 64, 64, 4, 2, 1, 8, true),
    ("unref_s.up2", D, 160, 32, 4, 2, 1, 16, true),
    ("unref_s.up3", D, 80, 16, 4, 2, 1, 32, true),
    ("unref_s.fuse", C, 40, 8, 3, 1, 1, 32, true),
    ("unref_s.out", C, 8, 1, 3, 1, 1, 32, false),
    ("calib_r.c0", C, 6, 8, 1, 1, 0, 32, true),
    ("calib_r.c1", C, 8, 16, 1, 1, 0, 32, true),
    ("calib_s.c0", C, 4, 8, 1, 1, 0, 32, true),
    ("calib_s.c1", C, 8, 16, 1, 1, 0, 32, true),
    ("ref_enc.l0.c0", C, 32, 8, 3, 1, 1, 32, true),
    ("ref_enc.l0.c1", C, 8, 8, 3, 1, 1, 32, true),
    ("ref_enc.l1.c0", C, 8, 8, 3, 2, 1, 16, true),
    ("ref_enc.l1.c1", C, 8, 16, 3, 1, 1, 16, true),
    ("ref_enc.l2.c0", C, 16, 16, 3, 2, 1, 8, true),
    ("ref_enc.l2.c1", C, 16, 32, 3, 1, 1, 8, true),
    ("ref_enc.l3.c0", C, 32, 32, 3, 2, 1, 4, true),
    ("ref_enc.l3.c1", C, 32, 64, 3, 1, 1, 4, true),
    ("ref_r.up1", D, 64, 64, 4, 2, 1, 8, true),
    ("ref_r.up2", D, 224, 32, 4, 2, 1, 16, true),
    ("ref_r.up3", D, 112, 16, 4, 2, 1, 32, true),
    ("ref_r.fuse", C, 56, 8, 3, 1, 1, 32, true),
    ("ref_r.out", C, 8, 3, 3, 1, 1, 32, false),
    ("ref_s.up1", D, 64, 64, 4, 2, 1, 8, true),
    ("ref_s.up2", D, 224, 32, 4, 2, 1, 16, true),
    ("ref_s.up3", D, 112, 16, 4, 2, 1, 32, true),
    ("ref_s.fuse", C, 56, 8, 3, 1, 1, 32, true),
    ("ref_s.out", C, 8, 1, 3, 1, 1, 32, false),
];

pub fn as_row(l: &LayerSpec) -> (String, LayerKind, usize, usize, usize, usize, usize, usize, bool) {
    (l.name.clone(), l.kind, l.in_channels, l.out_channels, l.kernel, l.stride, l.pad, l.out_size, l.norm)
}

pub fn se_oracle(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let hidden = b1.len();
    let mut out = x.data().to_vec();
    for bi in 0..n {
        let pooled: Vec<f64> = (0..c).map(|ch| x.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let z: Vec<f64> = (0..hidden).map(|j| (b1.data()[j] + (0..c).map(|i| w1.data()[j * c + i] * pooled[i]).sum::<f64>()).max(0.0)).collect();
        for ch in 0..c {
            let e = b2.data()[ch] + (0..hidden).map(|j| w2.data()[ch * hidden + j] * z[j]).sum::<f64>();
            let s = 1.0 / (1.0 + (-e).exp());
            for v in &mut out[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w] {
                *v *= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn unit(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.02..0.98))
}

pub fn eval2(f: impl FnOnce(&mut Tape, Var, Var) -> Var, p: &Tensor, g: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (pv, gv) = (tape.constant(p.clone()), tape.constant(g.clone()));
    let out = f(&mut tape, pv, gv);
    tape.value(out).item().unwrap()
}

pub fn pixel(p: &Tensor, g: &Tensor) -> f64 {
    eval2(|t, a, b| pixel_loss(t, a, b, &LossWeights::default()).unwrap(), p, g)
}

// Per-sample scale, then the plain mean over every element.
pub fn pixel_oracle(p: &Tensor, g: &Tensor) -> f64 {
    let n = p.shape()[0];
    let per = p.len() / n;
    let (mut smse, mut mse) = (0.0, 0.0);
    for b in 0..n {
        let (ps, gs) = (&p.data()[b * per..(b + 1) * per], &g.data()[b * per..(b + 1) * per]);
        let pg: f64 = ps.iter().zip(gs).map(|(x, y)| x * y).sum();
        let pp: f64 = ps.iter().map(|x| x * x).sum();
        let a = if pp == 0.0 { 0.0 } else { pg / pp };
        for i in 0..per {
            smse += (a * ps[i] - gs[i]).powi(2);
            mse += (ps[i] - gs[i]).powi(2);
        }
    }
    let len = p.len() as f64;
    0.95 * smse / len + 0.05 * mse / len
}

pub struct Fixture {
    pub targets: Targets,
    pub outputs: Vec<Tensor>,
}

// Six edge outputs, then unrefined R, S and refined R, S.
pub fn fixture(seed: u64, perfect: bool) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, s) = (2, 16);
    let reflectance = unit(&mut rng, &[b, 3, s, s]);
    let shading = unit(&mut rng, &[b, 1, s, s]);
    let image = Tensor::new(
        reflectance.shape().to_vec(),
        (0..reflectance.len())
            .map(|i| {
                let (bi, rest) = (i / (3 * s * s), i % (s * s));
                reflectance.data()[i] * shading.data()[bi * s * s + rest]
            })
            .collect(),
    )
    .unwrap();
    let edge = |rng: &mut ChaCha8Rng, size| unit(rng, &[b, 3, size, size]);
    let targets = Targets {
        image,
        reflectance_edges: [edge(&mut rng, s), edge(&mut rng, s / 2), edge(&mut rng, s / 4)],
        shading_edges: [edge(&mut rng, s), edge(&mut rng, s / 2), edge(&mut rng, s / 4)],
        reflectance,
        shading,
    };
    let outputs = if perfect {
        vec![
            targets.reflectance_edges[0].clone(),
            targets.reflectance_edges[1].clone(),
            targets.reflectance_edges[2].clone(),
            targets.shading_edges[0].clone(),
            targets.shading_edges[1].clone(),
            targets.shading_edges[2].clone(),
            targets.reflectance.clone(),
            targets.shading.clone(),
            targets.reflectance.clone(),
            targets.shading.clone(),
        ]
    } else {
        let shapes = [s, s / 2, s / 4, s, s / 2, s / 4];
        let mut v: Vec<Tensor> = shapes.iter().map(|&sz| edge(&mut rng, sz)).collect();
        v.push(unit(&mut rng, &[b, 3, s, s]));
        v.push(unit(&mut rng, &[b, 1, s, s]));
        v.push(unit(&mut rng, &[b, 3, s, s]));
        v.push(unit(&mut rng, &[b, 1, s, s]));
        v
    };
    Fixture { targets, outputs }
}

pub fn bundle(tape: &mut Tape, outputs: &[Tensor], edges: bool) -> ForwardBundle {
    let v: Vec<Var> = outputs.iter().map(|t| tape.param(t.clone())).collect();
    let e = |i: usize| edges.then_some(v[i]);
    ForwardBundle {
        reflectance_edge: e(0),
        reflectance_edge_half: e(1),
        reflectance_edge_quarter: e(2),
        shading_edge: e(3),
        shading_edge_half: e(4),
        shading_edge_quarter: e(5),
        unrefined_reflectance: v[6],
        unrefined_shading: v[7],
        refined_reflectance: v[8],
        refined_shading: v[9],
    }
}

pub fn breakdown_for(f: &Fixture, w: &LossWeights, edges: bool) -> LossBreakdown {
    let mut tape = Tape::new();
    let b = bundle(&mut tape, &f.outputs, edges);
    total_loss(&mut tape, &b, &f.targets, w, &PerceptualExtractor::new(7)).unwrap().1
}

/// Every loss term recomputed from single-term evaluations, then weighted by
/// hand with the default weights. Order: edge, unrefined, refined,
/// reconstruction, dssim, perceptual, total.
pub fn hand_terms(f: &Fixture) -> [f64; 7] {
    let t = &f.targets;
    let o = &f.outputs;
    let recon = {
        let (r, s) = (&o[8], &o[9]);
        let plane = 16 * 16;
        Tensor::new(r.shape().to_vec(), (0..r.len()).map(|i| r.data()[i] * s.data()[(i / (3 * plane)) * plane + i % plane]).collect())
            .unwrap()
    };
    let ext = PerceptualExtractor::new(7);
    let edge: f64 = (0..3).map(|i| pixel(&o[i], &t.reflectance_edges[i]) + pixel(&o[3 + i], &t.shading_edges[i])).sum();
    let unrefined = pixel(&o[6], &t.reflectance) + pixel(&o[7], &t.shading);
    let refined = pixel(&o[8], &t.reflectance) + pixel(&o[9], &t.shading);
    let rec = pixel(&recon, &t.image);
    let dssim = eval2(|tp, a, b| dssim_loss(tp, a, b).unwrap(), &o[8], &t.reflectance)
        + eval2(|tp, a, b| dssim_loss(tp, a, b).unwrap(), &o[9], &t.shading);
    let perc = eval2(|tp, a, b| perceptual_loss(tp, a, b, &ext).unwrap(), &o[8], &t.reflectance);
    let total = refined + 0.5 * unrefined + 0.4 * edge + 0.05 * perc + 0.4 * dssim + rec;
    [edge, unrefined, refined, rec, dssim, perc, total]
}
