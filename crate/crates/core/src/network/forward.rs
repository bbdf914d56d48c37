use std::collections::BTreeMap;

use super::{manifest, AttentionKind, LayerKind, LayerSpec, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, NormMode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Every supervised output of one forward pass, as tape handles.
///
/// Edge fields are `None` when the edge decoders are ablated. Without the
/// refinement module the refined fields are the unrefined handles.
#[derive(Clone, Copy, Debug)]
pub struct ForwardBundle {
    pub reflectance_edge: Option<Var>,
    pub shading_edge: Option<Var>,
    pub reflectance_edge_half: Option<Var>,
    pub shading_edge_half: Option<Var>,
    pub reflectance_edge_quarter: Option<Var>,
    pub shading_edge_quarter: Option<Var>,
    pub unrefined_reflectance: Var,
    pub unrefined_shading: Var,
    pub refined_reflectance: Var,
    pub refined_shading: Var,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub bundle: ForwardBundle,
    /// Tape handle of every parameter the pass touched.
    pub params: BTreeMap<String, Var>,
    /// Training-mode statistics per batch-norm layer, in evaluation order.
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// `σ(guide) ⊙ target + target`.
pub fn spatial_attention(tape: &mut Tape, guide: Var, target: Var) -> Result<Var> {
    if tape.shape(guide) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "attention guide {:?} and target {:?} differ",
            tape.shape(guide),
            tape.shape(target)
        )));
    }
    let gate = tape.sigmoid(guide)?;
    let inter = tape.mul(gate, target)?;
    tape.add(inter, target)
}

fn excitation(tape: &mut Tape, x: Var, fc1: (Var, Var), fc2: (Var, Var)) -> Result<Var> {
    let pooled = tape.global_avg_pool(x)?;
    let h = tape.conv2d(pooled, fc1.0, Some(fc1.1), 1, 0)?;
    let h = tape.relu(h)?;
    let e = tape.conv2d(h, fc2.0, Some(fc2.1), 1, 0)?;
    tape.sigmoid(e)
}

/// Squeeze-and-excitation: pool each channel, two affine maps with a ReLU
/// between, sigmoid, then rescale the channels of `x`.
pub fn channel_attention(tape: &mut Tape, x: Var, fc1: (Var, Var), fc2: (Var, Var)) -> Result<Var> {
    let s = excitation(tape, x, fc1, fc2)?;
    tape.scale_channels(x, s)
}

struct Net<'a> {
    tape: &'a mut Tape,
    params: &'a NetworkParams,
    cfg: &'a NetworkConfig,
    layers: BTreeMap<String, LayerSpec>,
    mode: Mode,
    vars: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl Net<'_> {
    fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.tape.param(self.params.get(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn layer(&mut self, name: &str, x: Var) -> Result<Var> {
        let spec = self.layers.get(name).ok_or_else(|| Error::Shape(format!("unknown layer {name}")))?.clone();
        let w = self.var(&format!("{name}.w"))?;
        let b = if spec.norm { None } else { Some(self.var(&format!("{name}.b"))?) };
        let y = match spec.kind {
            LayerKind::Conv => self.tape.conv2d(x, w, b, spec.stride, spec.pad)?,
            LayerKind::Deconv => self.tape.conv_transpose2d(x, w, b, spec.stride, spec.pad)?,
        };
        if !spec.norm {
            return Ok(y);
        }
        let gamma = self.var(&format!("{name}.bn.gamma"))?;
        let beta = self.var(&format!("{name}.bn.beta"))?;
        let (z, stats) = match self.mode {
            Mode::Train => self.tape.batch_norm(y, gamma, beta, NormMode::Train)?,
            Mode::Eval => {
                let mean = self.params.buffer(&format!("{name}.bn.mean"))?;
                let var = self.params.buffer(&format!("{name}.bn.var"))?;
                self.tape.batch_norm(y, gamma, beta, NormMode::Eval { running_mean: mean.data(), running_var: var.data() })?
            }
        };
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        self.tape.relu(z)
    }

    fn layer_cat(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let x = if inputs.len() == 1 { inputs[0] } else { self.tape.concat_channels(inputs)? };
        self.layer(name, x)
    }

    /// Features after every level, full resolution first.
    fn encoder(&mut self, prefix: &str, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.cfg.n_stages + 1);
        let mut h = x;
        for l in 0..=self.cfg.n_stages {
            h = self.layer(&format!("{prefix}.l{l}.c0"), h)?;
            h = self.layer(&format!("{prefix}.l{l}.c1"), h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Attention gate `name` steering `target` with `guide`.
    fn gate(&mut self, name: &str, guide: Var, target: Var) -> Result<Var> {
        match self.cfg.attention_kind {
            AttentionKind::None => Ok(target),
            AttentionKind::Spatial => spatial_attention(self.tape, guide, target),
            AttentionKind::Channel => {
                let fc1 = (self.var(&format!("{name}.fc1.w"))?, self.var(&format!("{name}.fc1.b"))?);
                let fc2 = (self.var(&format!("{name}.fc2.w"))?, self.var(&format!("{name}.fc2.b"))?);
                let s = excitation(self.tape, guide, fc1, fc2)?;
                let inter = self.tape.scale_channels(target, s)?;
                self.tape.add(inter, target)
            }
        }
    }
}

struct EdgeOutputs {
    r_feats: Vec<Var>,
    s_feats: Vec<Var>,
    r_logits: Var,
    s_logits: Var,
}

fn check_input(t: &Tensor, channels: usize, size: usize, what: &str) -> Result<usize> {
    let (b, c, h, w) = t.dims4()?;
    if c != channels || h != size || w != size {
        return Err(Error::Shape(format!("{what} must be Bx{channels}x{size}x{size}, got {:?}", t.shape())));
    }
    Ok(b)
}

/// Runs the network on `image [B,3,S,S]` and `ccr [B,6,S,S]` (or the
/// one-channel Canny map under the `canny_input` ablation).
pub fn forward(
    tape: &mut Tape,
    params: &NetworkParams,
    cfg: &NetworkConfig,
    image: &Tensor,
    ccr: &Tensor,
    mode: Mode,
) -> Result<ForwardOutput> {
    let layers = manifest(cfg)?.into_iter().map(|l| (l.name.clone(), l)).collect();
    let b = check_input(image, 3, cfg.input_size, "image")?;
    if cfg.has_ccr_encoder() && check_input(ccr, cfg.ccr_input_channels(), cfg.input_size, "ratio input")? != b {
        return Err(Error::Shape("image and ratio input batch sizes differ".into()));
    }
    let mut net = Net { tape, params, cfg, layers, mode, vars: BTreeMap::new(), stats: Vec::new() };
    let n = cfg.n_stages;

    let img_in = net.tape.constant(image.clone());
    let img = net.encoder("img_enc", img_in)?;
    let ccr_feats = if cfg.has_ccr_encoder() {
        let c = net.tape.constant(ccr.clone());
        Some(net.encoder("ccr_enc", c)?)
    } else {
        None
    };
    let skips_at = |level: usize| -> Vec<Var> {
        let mut v = vec![img[level]];
        if let Some(c) = &ccr_feats {
            v.push(c[level]);
        }
        v
    };

    let mut bundle_edges = [None; 6];
    let edges = if cfg.has_edges() {
        let first = skips_at(n);
        let mut r = net.layer_cat("edge_r.up1", &first)?;
        let mut s = net.layer_cat("edge_s.up1", &first)?;
        let (mut r_feats, mut s_feats) = (vec![r], vec![s]);
        for k in 2..=n {
            let skips = skips_at(n - k + 1);
            let r_in: Vec<Var> = [r, s].into_iter().chain(skips.iter().copied()).collect();
            let s_in: Vec<Var> = [s, r].into_iter().chain(skips.iter().copied()).collect();
            r = net.layer_cat(&format!("edge_r.up{k}"), &r_in)?;
            s = net.layer_cat(&format!("edge_s.up{k}"), &s_in)?;
            r_feats.push(r);
            s_feats.push(s);
        }
        let skips = skips_at(0);
        let r_in: Vec<Var> = [r, s].into_iter().chain(skips.iter().copied()).collect();
        let s_in: Vec<Var> = [s, r].into_iter().chain(skips.iter().copied()).collect();
        let rf = net.layer_cat("edge_r.fuse", &r_in)?;
        let sf = net.layer_cat("edge_s.fuse", &s_in)?;
        let r_logits = net.layer("edge_r.out", rf)?;
        let s_logits = net.layer("edge_s.out", sf)?;
        bundle_edges[0] = Some(net.tape.sigmoid(r_logits)?);
        bundle_edges[1] = Some(net.tape.sigmoid(s_logits)?);
        // Decoder features at level 2 and level 1 come from up(n-2) and up(n-1).
        for (slot, head, idx) in [(2, "side.half", n - 2), (4, "side.quarter", n - 3)] {
            for (j, feats) in [&r_feats, &s_feats].into_iter().enumerate() {
                let logits = net.layer(head, feats[idx])?;
                bundle_edges[slot + j] = Some(net.tape.sigmoid(logits)?);
            }
        }
        Some(EdgeOutputs { r_feats, s_feats, r_logits, s_logits })
    } else {
        None
    };

    // Unrefined decoders, gated by the edge decoder features.
    let bottleneck = img[n];
    let mut r = net.layer("unref_r.up1", bottleneck)?;
    let mut s = net.layer("unref_s.up1", bottleneck)?;
    for k in 1..=n {
        if let Some(e) = &edges {
            r = net.gate(&format!("unref_r.att{k}"), e.r_feats[k - 1], r)?;
            s = net.gate(&format!("unref_s.att{k}"), e.s_feats[k - 1], s)?;
        }
        let level = n - k;
        let (rn, sn) = if k < n {
            (format!("unref_r.up{}", k + 1), format!("unref_s.up{}", k + 1))
        } else {
            ("unref_r.fuse".to_string(), "unref_s.fuse".to_string())
        };
        let (r2, s2) = (net.layer_cat(&rn, &[r, s, img[level]])?, net.layer_cat(&sn, &[s, r, img[level]])?);
        r = r2;
        s = s2;
    }
    let mut r_logits = net.layer("unref_r.out", r)?;
    let mut s_logits = net.layer("unref_s.out", s)?;
    if let Some(e) = &edges {
        r_logits = net.gate("unref_r.att_out", e.r_logits, r_logits)?;
        let s_guide = net.tape.mean_channels(e.s_logits)?;
        s_logits = net.gate("unref_s.att_out", s_guide, s_logits)?;
    }
    let unrefined_reflectance = net.tape.sigmoid(r_logits)?;
    let unrefined_shading = net.tape.sigmoid(s_logits)?;

    let (refined_reflectance, refined_shading) = if cfg.has_refinement() {
        let mut r_in = vec![unrefined_reflectance];
        let mut s_in = vec![unrefined_shading];
        if edges.is_some() {
            r_in.push(bundle_edges[0].expect("edge output"));
            s_in.push(bundle_edges[1].expect("edge output"));
        }
        let cr = net.layer_cat("calib_r.c0", &r_in)?;
        let cr = net.layer("calib_r.c1", cr)?;
        let cs = net.layer_cat("calib_s.c0", &s_in)?;
        let cs = net.layer("calib_s.c1", cs)?;
        let joined = net.tape.concat_channels(&[cr, cs])?;
        let refined = net.encoder("ref_enc", joined)?;

        let mut r = net.layer("ref_r.up1", refined[n])?;
        let mut s = net.layer("ref_s.up1", refined[n])?;
        for k in 1..=n {
            let level = n - k;
            let mut skips = Vec::with_capacity(2);
            for d in ["ref_r", "ref_s"] {
                let mut v = vec![refined[level]];
                v.push(net.gate(&format!("{d}.att_img{k}"), img[level], refined[level])?);
                if let Some(c) = &ccr_feats {
                    v.push(net.gate(&format!("{d}.att_ccr{k}"), c[level], refined[level])?);
                }
                skips.push(v);
            }
            let (rn, sn) = if k < n {
                (format!("ref_r.up{}", k + 1), format!("ref_s.up{}", k + 1))
            } else {
                ("ref_r.fuse".to_string(), "ref_s.fuse".to_string())
            };
            let r_in: Vec<Var> = [r, s].into_iter().chain(skips[0].iter().copied()).collect();
            let s_in: Vec<Var> = [s, r].into_iter().chain(skips[1].iter().copied()).collect();
            let (r2, s2) = (net.layer_cat(&rn, &r_in)?, net.layer_cat(&sn, &s_in)?);
            r = r2;
            s = s2;
        }
        let rl = net.layer("ref_r.out", r)?;
        let sl = net.layer("ref_s.out", s)?;
        (net.tape.sigmoid(rl)?, net.tape.sigmoid(sl)?)
    } else {
        (unrefined_reflectance, unrefined_shading)
    };

    let [re, se, re_half, se_half, re_quarter, se_quarter] = bundle_edges;
    Ok(ForwardOutput {
        bundle: ForwardBundle {
            reflectance_edge: re,
            shading_edge: se,
            reflectance_edge_half: re_half,
            shading_edge_half: se_half,
            reflectance_edge_quarter: re_quarter,
            shading_edge_quarter: se_quarter,
            unrefined_reflectance,
            unrefined_shading,
            refined_reflectance,
            refined_shading,
        },
        params: net.vars,
        batch_stats: net.stats,
    })
}
