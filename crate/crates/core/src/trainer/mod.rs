//! Optimisation loop, Adam, and checkpoints.

mod checkpoint;
mod data;
mod infer;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights, PerceptualExtractor};
use crate::network::{build, forward, Mode, NetworkConfig, NetworkParams};
use crate::synth::{generate_dataset, SceneSpec};
use crate::tensor::{Tape, Tensor};

pub use checkpoint::{network_hash, sha256_hex, Checkpoint, FORMAT_VERSION, MAGIC};
pub use infer::{decompose, Decomposition};
pub use data::{image_to_tensor, make_batch, prepare_sample, ratio_input, tensor_to_image, Batch, Sample};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    /// Scene `i` uses seed `scene.seed + i * seed_stride`.
    pub seed_stride: u64,
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 128, seed_stride: 1, scene: SceneSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seeds parameter initialisation and batch order.
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub perceptual_seed: u64,
    pub dataset: DatasetConfig,
    pub weights: LossWeights,
    pub network: NetworkConfig,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            steps: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            perceptual_seed: 7,
            dataset: DatasetConfig::default(),
            weights: LossWeights::default(),
            network: NetworkConfig::default(),
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return err(format!("batch_size must be at least 2 for batch norm, got {}", self.batch_size));
        }
        if self.steps < 1 {
            return err("steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return err("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.dataset.count == 0 {
            return err("dataset count must be at least 1".into());
        }
        if self.dataset.scene.size != self.network.input_size {
            return err(format!(
                "scene size {} differs from network input_size {}",
                self.dataset.scene.size, self.network.input_size
            ));
        }
        self.dataset.scene.validate()?;
        self.weights.validate()?;
        self.network.validate()
    }

    /// Digest of everything that shapes the optimisation trajectory. The step
    /// budget and output path are excluded so a run can be extended.
    pub fn recipe_hash(&self) -> String {
        let recipe = Self { steps: 0, checkpoint_path: None, ..self.clone() };
        sha256_hex(&serde_json::to_vec(&recipe).expect("config serialises"))
    }
}

/// First and second moment estimates; absent entries are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam update; `t` is the 1-based index of this step.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    t: u64,
    h: AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Domain("adam step index is 1-based".into()));
    }
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= h.lr * mh / (vh.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Folds training-mode batch statistics into the running estimates.
pub fn update_running_stats(params: &mut NetworkParams, stats: &[(String, crate::tensor::BatchStats)]) -> Result<()> {
    for (layer, s) in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let key = format!("{layer}.bn.{suffix}");
            let running = params.buffers.get_mut(&key).ok_or_else(|| Error::Shape(format!("missing buffer {key}")))?;
            for (r, b) in running.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

/// Sample indices for batch `step`: the concatenation of per-epoch
/// shuffles, each a pure function of `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut pos = step as usize * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch_size {
        let epoch = pos / count;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..count).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos % count]);
        pos += 1;
    }
    out
}

/// Loss breakdown and parameter gradients for one batch in training mode.
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    pub batch_stats: Vec<(String, crate::tensor::BatchStats)>,
}

pub fn loss_and_grads(
    params: &NetworkParams,
    net: &NetworkConfig,
    batch: &Batch,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, net, &batch.image, &batch.ratio_input, Mode::Train)?;
    let (vars, breakdown) = total_loss(&mut tape, &out.bundle, &batch.targets, weights, extractor)?;
    for (term, v) in breakdown.terms() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {term} is {v}")));
        }
    }
    let mut g = tape.backward(vars.total)?;
    let grads = out.params.iter().map(|(name, &v)| (name.clone(), g.take(v))).collect();
    Ok(StepResult { breakdown, grads, batch_stats: out.batch_stats })
}

/// A training run in progress.
pub struct Trainer {
    pub config: TrainConfig,
    pub samples: Vec<Sample>,
    pub extractor: PerceptualExtractor,
    pub checkpoint: Checkpoint,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = build(&config.network, config.seed)?;
        let checkpoint = Checkpoint {
            network: config.network,
            params,
            adam: AdamState::default(),
            step: 0,
            data_seed: config.seed,
            recipe_hash: config.recipe_hash(),
        };
        Self::from_checkpoint(config, checkpoint)
    }

    /// Continues from `checkpoint`, which must come from the same recipe.
    pub fn from_checkpoint(config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        if checkpoint.recipe_hash != config.recipe_hash() {
            return Err(Error::Load("checkpoint was produced by a different training recipe".into()));
        }
        let scenes = generate_dataset(&config.dataset.scene, config.dataset.count, config.dataset.seed_stride)?;
        let samples = {
            use rayon::prelude::*;
            scenes.par_iter().map(|s| prepare_sample(s, &config.network)).collect::<Result<Vec<_>>>()?
        };
        let extractor = PerceptualExtractor::new(config.perceptual_seed);
        Ok(Self { config, samples, extractor, checkpoint })
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        let idx = batch_indices(self.checkpoint.data_seed, step, self.config.batch_size, self.samples.len());
        let refs: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        make_batch(&refs)
    }

    /// One optimisation step; returns the loss before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.batch(self.checkpoint.step)?;
        let r = loss_and_grads(&self.checkpoint.params, &self.config.network, &batch, &self.config.weights, &self.extractor)?;
        let t = self.checkpoint.step + 1;
        let hyper = AdamHyper {
            lr: self.config.learning_rate,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        };
        adam_step(&mut self.checkpoint.params.params, &r.grads, &mut self.checkpoint.adam, t, hyper)?;
        update_running_stats(&mut self.checkpoint.params, &r.batch_stats)?;
        self.checkpoint.step = t;
        Ok(r.breakdown)
    }

    /// Steps until `config.steps` have been applied in total.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &LossBreakdown)) -> Result<Vec<LossBreakdown>> {
        let mut trace = Vec::new();
        while self.checkpoint.step < self.config.steps {
            let b = self.step()?;
            on_step(self.checkpoint.step, &b);
            trace.push(b);
        }
        Ok(trace)
    }
}

/// Result of [`train`].
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossBreakdown>,
}

/// Trains from scratch and writes the checkpoint when a path is configured.
pub fn train(config: TrainConfig) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config)?;
    let trace = trainer.run(|_, _| {})?;
    if let Some(path) = &trainer.config.checkpoint_path {
        trainer.checkpoint.save(path)?;
    }
    Ok(TrainRun { checkpoint: trainer.checkpoint, trace })
}
