//! Central finite-difference checks of the autodiff engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{dssim_loss, perceptual_loss, pixel_loss, total_loss, LossWeights, PerceptualExtractor};
use crate::network::{build, channel_attention, forward, spatial_attention, Mode, NetworkConfig, NetworkParams};
use crate::synth::{generate_dataset, SceneSpec};
use crate::tensor::{NormMode, Tape, Tensor, Var};
use crate::trainer::{make_batch, prepare_sample, Batch};

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Checks the gradient of `f` with respect to every entry of every input.
///
/// `f` builds a scalar from the inputs on a fresh tape; tensor-valued
/// primitives are reduced by [`project`] first.
pub fn check_scalar_fn<F>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        analytic.extend_from_slice(grads.get(vars[i]).data());
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * STEP));
        }
    }
    Ok(CheckResult { name: name.to_string(), rel_error: relative_error(&analytic, &numeric), tolerance: PRIMITIVE_TOLERANCE })
}

/// `Σ out ⊙ r` for a fixed pseudo-random `r`, turning a tensor into a scalar
/// whose gradient exercises every output entry.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0));
    let rv = tape.constant(r);
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from 0 with random sign, for kinked primitives.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Finite-difference checks of every differentiable primitive and loss.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |r: Result<CheckResult>| -> Result<()> {
        out.push(r?);
        Ok(())
    };
    let x4 = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        push(check_scalar_fn(&format!("conv2d s{stride} p{pad}"), &[x4.clone(), w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, 1)
        }))?;
    }
    let xt = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let wt = rand_tensor(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
    let bt = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    push(check_scalar_fn("conv_transpose2d", &[xt, wt, bt], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(t, y, 2)
    }))?;

    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    push(check_scalar_fn("batch_norm train", &[x4.clone(), gamma.clone(), beta.clone()], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Train)?;
        project(t, y, 3)
    }))?;
    let rm = [0.1, -0.2, 0.3];
    let rv = [0.5, 1.5, 2.0];
    push(check_scalar_fn("batch_norm eval", &[x4.clone(), gamma, beta], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Eval { running_mean: &rm, running_var: &rv })?;
        project(t, y, 4)
    }))?;

    let kinked = away_from_zero(&mut rng, &[2, 3, 4, 4]);
    push(check_scalar_fn("relu", &[kinked.clone()], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 5)
    }))?;
    push(check_scalar_fn("abs", &[kinked], |t, v| {
        let y = t.abs(v[0])?;
        project(t, y, 6)
    }))?;
    let a = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    let pos = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.5, 2.0);
    push(check_scalar_fn("sigmoid", &[a.clone()], |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, 7)
    }))?;
    push(check_scalar_fn("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 8)
    }))?;
    push(check_scalar_fn("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 9)
    }))?;
    push(check_scalar_fn("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 10)
    }))?;
    push(check_scalar_fn("div", &[a.clone(), pos.clone()], |t, v| {
        let y = t.div(v[0], v[1])?;
        project(t, y, 11)
    }))?;
    push(check_scalar_fn("scale", &[a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        project(t, y, 12)
    }))?;
    push(check_scalar_fn("add_scalar", &[a.clone()], |t, v| {
        let y = t.add_scalar(v[0], 0.3)?;
        project(t, y, 13)
    }))?;
    let c1 = rand_tensor(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
    push(check_scalar_fn("concat_channels", &[a.clone(), c1.clone()], |t, v| {
        let y = t.concat_channels(&[v[0], v[1]])?;
        project(t, y, 14)
    }))?;
    push(check_scalar_fn("sum", &[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    }))?;
    push(check_scalar_fn("mean", &[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    }))?;
    push(check_scalar_fn("sum_per_sample", &[a.clone()], |t, v| {
        let y = t.sum_per_sample(v[0])?;
        project(t, y, 15)
    }))?;
    let s2 = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    push(check_scalar_fn("mul_per_sample", &[a.clone(), s2], |t, v| {
        let y = t.mul_per_sample(v[0], v[1])?;
        project(t, y, 16)
    }))?;
    push(check_scalar_fn("repeat_channels", &[c1], |t, v| {
        let y = t.repeat_channels(v[0], 3)?;
        project(t, y, 17)
    }))?;
    push(check_scalar_fn("mean_channels", &[a.clone()], |t, v| {
        let y = t.mean_channels(v[0])?;
        project(t, y, 18)
    }))?;
    push(check_scalar_fn("global_avg_pool", &[a.clone()], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, 19)
    }))?;
    let sc = rand_tensor(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
    push(check_scalar_fn("scale_channels", &[a.clone(), sc], |t, v| {
        let y = t.scale_channels(v[0], v[1])?;
        project(t, y, 20)
    }))?;
    let kernel = [0.2, 0.5, 0.3];
    push(check_scalar_fn("blur", &[a.clone()], |t, v| {
        let y = t.blur(v[0], &kernel)?;
        project(t, y, 21)
    }))?;
    push(check_scalar_fn("spatial_attention", &[a.clone(), b.clone()], |t, v| {
        let y = spatial_attention(t, v[0], v[1])?;
        project(t, y, 22)
    }))?;
    let f1w = rand_tensor(&mut rng, &[1, 3, 1, 1], -1.0, 1.0);
    let f1b = rand_tensor(&mut rng, &[1], 0.2, 0.5);
    let f2w = rand_tensor(&mut rng, &[3, 1, 1, 1], -1.0, 1.0);
    let f2b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    push(check_scalar_fn("channel_attention", &[a.clone(), f1w, f1b, f2w, f2b], |t, v| {
        let y = channel_attention(t, v[0], (v[1], v[2]), (v[3], v[4]))?;
        project(t, y, 23)
    }))?;

    let w = LossWeights::default();
    let pred = rand_tensor(&mut rng, &[2, 3, 12, 12], 0.05, 0.95);
    let gt = rand_tensor(&mut rng, &[2, 3, 12, 12], 0.05, 0.95);
    push(check_scalar_fn("pixel_loss", &[pred.clone(), gt.clone()], |t, v| pixel_loss(t, v[0], v[1], &w)))?;
    push(check_scalar_fn("dssim_loss", &[pred.clone(), gt.clone()], |t, v| dssim_loss(t, v[0], v[1])))?;
    let extractor = PerceptualExtractor::new(seed);
    let pp = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.05, 0.95);
    let pg = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.05, 0.95);
    push(check_scalar_fn("perceptual_loss", &[pp, pg], |t, v| perceptual_loss(t, v[0], v[1], &extractor)))?;
    Ok(out)
}

/// A small training batch of generated scenes for network-level checks.
pub fn sample_batch(cfg: &NetworkConfig, count: usize, seed: u64) -> Result<Batch> {
    let spec = SceneSpec { seed, size: cfg.input_size, ..SceneSpec::default() };
    let scenes = generate_dataset(&spec, count, 1)?;
    let samples = scenes.iter().map(|s| prepare_sample(s, cfg)).collect::<Result<Vec<_>>>()?;
    make_batch(&samples.iter().collect::<Vec<_>>())
}

fn network_loss(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    batch: &Batch,
    extractor: &PerceptualExtractor,
) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, cfg, &batch.image, &batch.ratio_input, Mode::Train)?;
    let (vars, _) = total_loss(&mut tape, &out.bundle, &batch.targets, &LossWeights::default(), extractor)?;
    Ok((tape.value(vars.total).item()?, tape.kink_pattern()))
}

/// Directions drawn before giving up on finding a kink-free segment.
pub const MAX_DIRECTIONS: usize = 20;

#[derive(Clone, Debug, Serialize)]
pub struct DirectionalCheck {
    pub result: CheckResult,
    pub analytic: f64,
    pub numeric: f64,
    /// Directions rejected because a ReLU or abs input changed sign within
    /// the finite-difference segment.
    pub rejected_directions: usize,
}

/// Directional derivative of the full training loss along a random unit
/// direction, analytic against central differences.
///
/// Like the primitive checks, the probe stays away from kinks: a direction
/// along which any ReLU or abs input changes sign between `θ − h·d` and
/// `θ + h·d` is redrawn.
pub fn network_directional_check(cfg: &NetworkConfig, seed: u64) -> Result<DirectionalCheck> {
    let params = build(cfg, seed)?;
    let batch = sample_batch(cfg, 2, seed.wrapping_mul(31).wrapping_add(5))?;
    let extractor = PerceptualExtractor::new(seed);

    let mut tape = Tape::new();
    let out = forward(&mut tape, &params, cfg, &batch.image, &batch.ratio_input, Mode::Train)?;
    let (vars, _) = total_loss(&mut tape, &out.bundle, &batch.targets, &LossWeights::default(), &extractor)?;
    let grads = tape.backward(vars.total)?;
    let centre = tape.kink_pattern();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1CE);
    let mut last = None;
    for rejected in 0..MAX_DIRECTIONS {
        let mut dir: Vec<(String, Vec<f64>)> = params
            .params
            .iter()
            .map(|(k, t)| (k.clone(), (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let norm = dir.iter().flat_map(|(_, d)| d.iter()).map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|(_, d)| d.iter_mut().for_each(|v| *v /= norm));

        let mut analytic = 0.0;
        for (name, d) in &dir {
            let g = grads.get(out.params[name]);
            analytic += g.data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
        }
        let shifted = |sign: f64| -> Result<(f64, Vec<bool>)> {
            let mut p = params.clone();
            for (name, d) in &dir {
                let t = p.params.get_mut(name).expect("same names");
                t.data_mut().iter_mut().zip(d).for_each(|(v, dv)| *v += sign * STEP * dv);
            }
            network_loss(&p, cfg, &batch, &extractor)
        };
        let (plus, plus_pattern) = shifted(1.0)?;
        let (minus, minus_pattern) = shifted(-1.0)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        let check = DirectionalCheck {
            result: CheckResult {
                name: format!("network directional derivative (seed {seed})"),
                rel_error: relative_error(&[analytic], &[numeric]),
                tolerance: NETWORK_TOLERANCE,
            },
            analytic,
            numeric,
            rejected_directions: rejected,
        };
        if plus_pattern == centre && minus_pattern == centre {
            return Ok(check);
        }
        last = Some(check);
    }
    Ok(last.expect("at least one direction"))
}
