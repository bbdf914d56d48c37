//! Training objectives, recorded on a [`Tape`] so they can be differentiated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::network::ForwardBundle;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_e: f64,
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_smse: f64,
    pub lambda_mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_u: 0.5, lambda_e: 0.4, lambda_d: 0.4, lambda_p: 0.05, lambda_smse: 0.95, lambda_mse: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_u, self.lambda_e, self.lambda_d, self.lambda_p, self.lambda_smse, self.lambda_mse];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar value of every term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub edge: f64,
    pub unrefined: f64,
    pub refined: f64,
    pub reconstruction: f64,
    pub dssim: f64,
    pub perceptual: f64,
    pub total: f64,
    /// False when the network has no edge outputs and `edge` is 0 by construction.
    pub edges_present: bool,
}

impl LossBreakdown {
    /// The weighted sum recomputed from the stored terms.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.refined
            + w.lambda_u * self.unrefined
            + w.lambda_e * self.edge
            + w.lambda_p * self.perceptual
            + w.lambda_d * self.dssim
            + self.reconstruction
    }

    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("edge", self.edge),
            ("unrefined", self.unrefined),
            ("refined", self.refined),
            ("reconstruction", self.reconstruction),
            ("dssim", self.dssim),
            ("perceptual", self.perceptual),
            ("total", self.total),
        ]
    }
}

fn check_same(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

pub fn mse_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    check_same(tape, pred, gt, "mse_loss")?;
    let d = tape.sub(pred, gt)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Scale-invariant MSE; each sample along the leading axis gets its own
/// optimal scale `⟨p,g⟩/⟨p,p⟩`, which stays part of the differentiated graph.
pub fn smse_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    check_same(tape, pred, gt, "smse_loss")?;
    let pg = tape.mul(pred, gt)?;
    let pp = tape.mul(pred, pred)?;
    let num = tape.sum_per_sample(pg)?;
    let den = tape.sum_per_sample(pp)?;
    let alpha = tape.div(num, den)?;
    let scaled = tape.mul_per_sample(pred, alpha)?;
    mse_loss(tape, scaled, gt)
}

/// `λ_smse·SMSE + λ_mse·MSE`.
pub fn pixel_loss(tape: &mut Tape, pred: Var, gt: Var, w: &LossWeights) -> Result<Var> {
    let s = smse_loss(tape, pred, gt)?;
    let m = mse_loss(tape, pred, gt)?;
    let s = tape.scale(s, w.lambda_smse)?;
    let m = tape.scale(m, w.lambda_mse)?;
    tape.add(s, m)
}

/// Mean SSIM over all planes and valid window positions.
pub fn ssim_loss_term(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    check_same(tape, pred, gt, "ssim")?;
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mx = tape.blur(pred, &k)?;
    let my = tape.blur(gt, &k)?;
    let xx = tape.mul(pred, pred)?;
    let yy = tape.mul(gt, gt)?;
    let xy = tape.mul(pred, gt)?;
    let mxx = tape.blur(xx, &k)?;
    let myy = tape.blur(yy, &k)?;
    let mxy = tape.blur(xy, &k)?;
    let mx2 = tape.mul(mx, mx)?;
    let my2 = tape.mul(my, my)?;
    let mxmy = tape.mul(mx, my)?;
    let vx = tape.sub(mxx, mx2)?;
    let vy = tape.sub(myy, my2)?;
    let cxy = tape.sub(mxy, mxmy)?;

    let a = tape.scale(mxmy, 2.0)?;
    let a = tape.add_scalar(a, SSIM_C1)?;
    let b = tape.scale(cxy, 2.0)?;
    let b = tape.add_scalar(b, SSIM_C2)?;
    let num = tape.mul(a, b)?;
    let c = tape.add(mx2, my2)?;
    let c = tape.add_scalar(c, SSIM_C1)?;
    let d = tape.add(vx, vy)?;
    let d = tape.add_scalar(d, SSIM_C2)?;
    let den = tape.mul(c, d)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `(1 − SSIM) / 2`.
pub fn dssim_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let s = ssim_loss_term(tape, pred, gt)?;
    let neg = tape.scale(s, -0.5)?;
    tape.add_scalar(neg, 0.5)
}

/// Frozen random strided conv stack standing in for a pretrained feature
/// extractor. Zero biases make every stage positively homogeneous.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    weights: Vec<Tensor>,
}

pub const PERCEPTUAL_CHANNELS: [usize; 5] = [3, 8, 16, 32, 64];

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = PERCEPTUAL_CHANNELS
            .windows(2)
            .map(|io| {
                let fan_in = io[0] * 9;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&[io[1], io[0], 3, 3], |_| normal.sample(&mut rng))
            })
            .collect();
        Self { weights }
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut h = x;
        for w in &self.weights {
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(h, wv, None, 2, 1)?;
            h = tape.relu(y)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Sum over stages of the mean absolute feature difference.
pub fn perceptual_loss(tape: &mut Tape, pred: Var, gt: Var, extractor: &PerceptualExtractor) -> Result<Var> {
    check_same(tape, pred, gt, "perceptual_loss")?;
    if tape.value(pred).dims4()?.1 != 3 {
        return Err(Error::Shape("perceptual loss expects 3-channel inputs".into()));
    }
    let fp = extractor.features(tape, pred)?;
    let fg = extractor.features(tape, gt)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fg) {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d)?;
        let m = tape.mean(d)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// Ground truth for one batch, `[B,C,H,W]` each.
#[derive(Clone, Debug)]
pub struct Targets {
    pub image: Tensor,
    pub reflectance: Tensor,
    pub shading: Tensor,
    /// Reflectance and shading edges at full, half and quarter resolution,
    /// replicated to three channels.
    pub reflectance_edges: [Tensor; 3],
    pub shading_edges: [Tensor; 3],
}

/// Sum of `pixel_loss` over the six edge outputs, or `None` when the
/// bundle has no edge outputs.
pub fn edge_loss(tape: &mut Tape, bundle: &ForwardBundle, targets: &Targets, w: &LossWeights) -> Result<Option<Var>> {
    let outputs = [
        (bundle.reflectance_edge, &targets.reflectance_edges[0]),
        (bundle.reflectance_edge_half, &targets.reflectance_edges[1]),
        (bundle.reflectance_edge_quarter, &targets.reflectance_edges[2]),
        (bundle.shading_edge, &targets.shading_edges[0]),
        (bundle.shading_edge_half, &targets.shading_edges[1]),
        (bundle.shading_edge_quarter, &targets.shading_edges[2]),
    ];
    if outputs.iter().all(|(o, _)| o.is_none()) {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (out, gt) in outputs {
        let out = out.ok_or_else(|| Error::Shape("bundle has only some of the edge outputs".into()))?;
        let g = tape.constant(gt.clone());
        let l = pixel_loss(tape, out, g, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}

/// Tape handles of every term, for inspection and backward.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub edge: Option<Var>,
    pub unrefined: Var,
    pub refined: Var,
    pub reconstruction: Var,
    pub dssim: Var,
    pub perceptual: Var,
    pub total: Var,
}

/// The weighted objective
/// `L_r + λ_u·L_u + λ_e·L_e + λ_p·L_p + λ_d·L_dssim + L_rec`.
pub fn total_loss(
    tape: &mut Tape,
    bundle: &ForwardBundle,
    targets: &Targets,
    w: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<(LossVars, LossBreakdown)> {
    w.validate()?;
    let r_gt = tape.constant(targets.reflectance.clone());
    let s_gt = tape.constant(targets.shading.clone());
    let img = tape.constant(targets.image.clone());

    let edge = edge_loss(tape, bundle, targets, w)?;

    let ur = pixel_loss(tape, bundle.unrefined_reflectance, r_gt, w)?;
    let us = pixel_loss(tape, bundle.unrefined_shading, s_gt, w)?;
    let unrefined = tape.add(ur, us)?;

    let rr = pixel_loss(tape, bundle.refined_reflectance, r_gt, w)?;
    let rs = pixel_loss(tape, bundle.refined_shading, s_gt, w)?;
    let refined = tape.add(rr, rs)?;

    let s3 = tape.repeat_channels(bundle.refined_shading, 3)?;
    let recon_img = tape.mul(bundle.refined_reflectance, s3)?;
    let reconstruction = pixel_loss(tape, recon_img, img, w)?;

    let dr = dssim_loss(tape, bundle.refined_reflectance, r_gt)?;
    let ds = dssim_loss(tape, bundle.refined_shading, s_gt)?;
    let dssim = tape.add(dr, ds)?;

    let perceptual = perceptual_loss(tape, bundle.refined_reflectance, r_gt, extractor)?;

    let mut total = tape.add(refined, reconstruction)?;
    let mut weighted = |tape: &mut Tape, term: Var, lambda: f64| -> Result<()> {
        let s = tape.scale(term, lambda)?;
        total = tape.add(total, s)?;
        Ok(())
    };
    weighted(tape, unrefined, w.lambda_u)?;
    if let Some(e) = edge {
        weighted(tape, e, w.lambda_e)?;
    }
    weighted(tape, perceptual, w.lambda_p)?;
    weighted(tape, dssim, w.lambda_d)?;

    let item = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        edge: edge.map_or(0.0, item),
        unrefined: item(unrefined),
        refined: item(refined),
        reconstruction: item(reconstruction),
        dssim: item(dssim),
        perceptual: item(perceptual),
        total: item(total),
        edges_present: edge.is_some(),
    };
    Ok((LossVars { edge, unrefined, refined, reconstruction, dssim, perceptual, total }, breakdown))
}
