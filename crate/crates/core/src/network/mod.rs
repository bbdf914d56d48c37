//! Scaled edge-guided decomposition network.
//!
//! Four sub-networks: an image encoder and a cross-color-ratio encoder, a
//! pair of linked edge decoders with shared side-output heads, edge-guided
//! unrefined decoders, and a local refinement module. The channel layout at
//! every depth follows the full-size design with `base_channels` in place of
//! 64; see [`manifest`] for the generated layer table.

mod forward;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{channel_attention, forward, spatial_attention, ForwardBundle, ForwardOutput, Mode};

/// Width of the two 1×1 feature-calibration layers, independent of scale.
pub const CALIB_HIDDEN: usize = 8;
pub const CALIB_OUT: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Spatial,
    Channel,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_ccr_encoder: bool,
    pub no_edge_guidance: bool,
    /// Feed a one-channel Canny map of the image to the second encoder.
    pub canny_input: bool,
    pub no_refinement: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub base_channels: usize,
    /// Number of stride-2 stages in each encoder.
    pub n_stages: usize,
    pub attention_kind: AttentionKind,
    pub se_reduction: usize,
    pub ablations: Ablations,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            base_channels: 8,
            n_stages: 3,
            attention_kind: AttentionKind::Spatial,
            se_reduction: 4,
            ablations: Ablations::default(),
        }
    }
}

impl NetworkConfig {
    /// The full-size configuration: 256 pixels, 64 base channels, four halvings.
    pub fn full_size() -> Self {
        Self { input_size: 256, base_channels: 64, n_stages: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_stages < 3 {
            return err(format!("n_stages must be at least 3 for the side outputs, got {}", self.n_stages));
        }
        if self.input_size == 0 || self.input_size % (1 << self.n_stages) != 0 || self.input_size % 4 != 0 {
            return err(format!(
                "input_size {} must be divisible by 2^n_stages = {} and by 4",
                self.input_size,
                1usize << self.n_stages
            ));
        }
        if self.base_channels < 2 {
            return err(format!("base_channels must be at least 2, got {}", self.base_channels));
        }
        if self.se_reduction == 0 {
            return err("se_reduction must be positive".into());
        }
        if self.attention_kind == AttentionKind::Channel {
            let bad = (0..=self.n_stages)
                .map(|l| self.channels(l))
                .find(|c| c % self.se_reduction != 0);
            if let Some(c) = bad {
                return err(format!("{c} feature channels are not divisible by se_reduction {}", self.se_reduction));
            }
        }
        if self.ablations.no_ccr_encoder && self.ablations.canny_input {
            return err("canny_input replaces the ratio encoder input and cannot be combined with no_ccr_encoder".into());
        }
        Ok(())
    }

    /// Feature channels of encoder level `level` (level 0 is full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> level
    }

    /// Channels of the second encoder's input.
    pub fn ccr_input_channels(&self) -> usize {
        if self.ablations.canny_input {
            1
        } else {
            crate::ccr::CCR_CHANNELS
        }
    }

    pub fn has_ccr_encoder(&self) -> bool {
        !self.ablations.no_ccr_encoder
    }

    pub fn has_edges(&self) -> bool {
        !self.ablations.no_edge_guidance
    }

    pub fn has_refinement(&self) -> bool {
        !self.ablations.no_refinement
    }

    fn encoder_count(&self) -> usize {
        if self.has_ccr_encoder() {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Deconv,
}

/// One parameterised layer of the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial extent of the (square) output.
    pub out_size: usize,
    /// Followed by batch norm and ReLU; otherwise the layer carries a bias.
    pub norm: bool,
}

impl LayerSpec {
    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            LayerKind::Deconv => vec![self.in_channels, self.out_channels, self.kernel, self.kernel],
        }
    }

    pub fn param_count(&self) -> usize {
        let w = self.in_channels * self.out_channels * self.kernel * self.kernel;
        w + if self.norm { 2 * self.out_channels } else { self.out_channels }
    }
}

struct ManifestBuilder<'a> {
    cfg: &'a NetworkConfig,
    layers: Vec<LayerSpec>,
}

impl ManifestBuilder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, name: String, kind: LayerKind, cin: usize, cout: usize, k: usize, s: usize, p: usize, out: usize, norm: bool) {
        self.layers.push(LayerSpec {
            name,
            kind,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            pad: p,
            out_size: out,
            norm,
        });
    }

    fn encoder(&mut self, prefix: &str, in_ch: usize) {
        let cfg = self.cfg;
        self.push(format!("{prefix}.l0.c0"), LayerKind::Conv, in_ch, cfg.channels(0), 3, 1, 1, cfg.level_size(0), true);
        self.push(format!("{prefix}.l0.c1"), LayerKind::Conv, cfg.channels(0), cfg.channels(0), 3, 1, 1, cfg.level_size(0), true);
        for l in 1..=cfg.n_stages {
            let (prev, cur, size) = (cfg.channels(l - 1), cfg.channels(l), cfg.level_size(l));
            self.push(format!("{prefix}.l{l}.c0"), LayerKind::Conv, prev, prev, 3, 2, 1, size, true);
            self.push(format!("{prefix}.l{l}.c1"), LayerKind::Conv, prev, cur, 3, 1, 1, size, true);
        }
    }

    /// Linked decoder: `first_in` channels into the first upsampling, then at
    /// each level the own and partner features plus `skips` encoder features.
    fn decoder(&mut self, prefix: &str, first_in: usize, skips: usize, out_ch: usize) {
        let cfg = self.cfg;
        let n = cfg.n_stages;
        for k in 1..=n {
            let level = n - k;
            let cin = if k == 1 { first_in } else { 2 * cfg.channels(level + 2) + skips * cfg.channels(level + 1) };
            self.push(format!("{prefix}.up{k}"), LayerKind::Deconv, cin, cfg.channels(level + 1), 4, 2, 1, cfg.level_size(level), true);
        }
        let fuse_in = 2 * cfg.channels(1) + skips * cfg.channels(0);
        self.push(format!("{prefix}.fuse"), LayerKind::Conv, fuse_in, cfg.channels(0), 3, 1, 1, cfg.level_size(0), true);
        self.push(format!("{prefix}.out"), LayerKind::Conv, cfg.channels(0), out_ch, 3, 1, 1, cfg.level_size(0), false);
    }

    fn se(&mut self, prefix: &str, c: usize) {
        let hidden = c.div_ceil(self.cfg.se_reduction);
        self.push(format!("{prefix}.fc1"), LayerKind::Conv, c, hidden, 1, 1, 0, 1, false);
        self.push(format!("{prefix}.fc2"), LayerKind::Conv, hidden, c, 1, 1, 0, 1, false);
    }
}

/// Generated layer table for `cfg`, in parameter-initialisation order.
pub fn manifest(cfg: &NetworkConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let mut b = ManifestBuilder { cfg, layers: Vec::new() };
    let n = cfg.n_stages;
    let e = cfg.encoder_count();
    let channel = cfg.attention_kind == AttentionKind::Channel;

    b.encoder("img_enc", 3);
    if cfg.has_ccr_encoder() {
        b.encoder("ccr_enc", cfg.ccr_input_channels());
    }
    if cfg.has_edges() {
        for d in ["edge_r", "edge_s"] {
            b.decoder(d, e * cfg.channels(n), e, 3);
        }
        // One head per scale, shared by both edge decoders. A decoder feature
        // at level l carries the channels of encoder level l + 1.
        b.push("side.quarter".into(), LayerKind::Conv, cfg.channels(3), 3, 3, 1, 1, cfg.level_size(2), false);
        b.push("side.half".into(), LayerKind::Conv, cfg.channels(2), 3, 3, 1, 1, cfg.level_size(1), false);
    }
    for (d, out) in [("unref_r", 3), ("unref_s", 1)] {
        b.decoder(d, cfg.channels(n), 1, out);
        if channel && cfg.has_edges() {
            for k in 1..=n {
                b.se(&format!("{d}.att{k}"), cfg.channels(n - k + 1));
            }
            b.se(&format!("{d}.att_out"), out);
        }
    }
    if cfg.has_refinement() {
        let size = cfg.level_size(0);
        let edge_ch = if cfg.has_edges() { 3 } else { 0 };
        for (d, ch) in [("calib_r", 3), ("calib_s", 1)] {
            b.push(format!("{d}.c0"), LayerKind::Conv, ch + edge_ch, CALIB_HIDDEN, 1, 1, 0, size, true);
            b.push(format!("{d}.c1"), LayerKind::Conv, CALIB_HIDDEN, CALIB_OUT, 1, 1, 0, size, true);
        }
        b.encoder("ref_enc", 2 * CALIB_OUT);
        for (d, out) in [("ref_r", 3), ("ref_s", 1)] {
            b.decoder(d, cfg.channels(n), 1 + e, out);
            if channel {
                for k in 1..=n {
                    let c = cfg.channels(n - k);
                    b.se(&format!("{d}.att_img{k}"), c);
                    if cfg.has_ccr_encoder() {
                        b.se(&format!("{d}.att_ccr{k}"), c);
                    }
                }
            }
        }
    }
    Ok(b.layers)
}

/// Trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub params: BTreeMap<String, Tensor>,
    /// `<layer>.bn.mean` and `<layer>.bn.var` running estimates.
    pub buffers: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::Shape(format!("missing buffer {name}")))
    }
}

/// Parameter tensor names and shapes implied by `cfg`.
pub fn param_shapes(cfg: &NetworkConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for layer in manifest(cfg)? {
        out.push((format!("{}.w", layer.name), layer.weight_shape()));
        if layer.norm {
            out.push((format!("{}.bn.gamma", layer.name), vec![layer.out_channels]));
            out.push((format!("{}.bn.beta", layer.name), vec![layer.out_channels]));
        } else {
            out.push((format!("{}.b", layer.name), vec![layer.out_channels]));
        }
    }
    Ok(out)
}

/// Fresh parameters: fan-in scaled normal weights, zero biases, identity
/// batch norm. Deterministic in `seed`.
pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for layer in manifest(cfg)? {
        let shape = layer.weight_shape();
        let fan_in = match layer.kind {
            LayerKind::Conv => layer.in_channels * layer.kernel * layer.kernel,
            // Each output pixel of a stride-s transposed conv sees k²/s² taps.
            LayerKind::Deconv => layer.in_channels * layer.kernel * layer.kernel / (layer.stride * layer.stride),
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
        params.insert(format!("{}.w", layer.name), Tensor::new(shape, w)?);
        let c = layer.out_channels;
        if layer.norm {
            params.insert(format!("{}.bn.gamma", layer.name), Tensor::full(&[c], 1.0));
            params.insert(format!("{}.bn.beta", layer.name), Tensor::zeros(&[c]));
            buffers.insert(format!("{}.bn.mean", layer.name), Tensor::zeros(&[c]));
            buffers.insert(format!("{}.bn.var", layer.name), Tensor::full(&[c], 1.0));
        } else {
            params.insert(format!("{}.b", layer.name), Tensor::zeros(&[c]));
        }
    }
    Ok(NetworkParams { params, buffers })
}

/// Total number of trainable scalars.
pub fn param_count(params: &NetworkParams) -> usize {
    params.params.values().map(Tensor::len).sum()
}
