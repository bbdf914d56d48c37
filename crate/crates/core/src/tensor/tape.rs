use rayon::prelude::*;

use super::kernels::{blur_valid, blur_valid_adjoint, col2im, gemm, im2col, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm normalisation source.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    Train,
    Eval { running_mean: &'a [f64], running_var: &'a [f64] },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running averages.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    MulPerSample(Var, Var),
    RepeatChannels(Var, usize),
    MeanChannels(Var),
    GlobalAvgPool(Var),
    ScaleChannels(Var, Var),
    Blur { x: Var, kernel: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// consumers and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(b))
            }
            Op::BatchNorm { x, gamma, beta, .. } => self.rg(*x) || self.rg(*gamma) || self.rg(*beta),
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumPerSample(a)
            | Op::RepeatChannels(a, _)
            | Op::MeanChannels(a)
            | Op::GlobalAvgPool(a)
            | Op::Blur { x: a, .. } => self.rg(*a),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulPerSample(a, b)
            | Op::ScaleChannels(a, b) => self.rg(*a) || self.rg(*b),
            Op::Concat(vs) => vs.iter().any(|v| self.rg(*v)),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn conv_geom(&self, x: Var, k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!("{k}x{k} kernel does not fit a padded {h}x{w} input")));
        }
        Ok(ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Cross-correlation of `x [B,Cin,H,W]` with `w [Cout,Cin,k,k]` plus bias.
    ///
    /// Output extents follow the floor convention
    /// `H' = ⌊(H + 2·pad − k) / stride⌋ + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, cin, _, _) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} does not match input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let g = self.conv_geom(x, kh, stride, pad)?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let in_sz = cin * g.height * g.width;
        let out_sz = cout * g.cols();
        let mut out = vec![0.0; bsz * out_sz];
        out.par_chunks_mut(out_sz).enumerate().for_each(|(bi, o)| {
            let mut cols = vec![0.0; g.rows() * g.cols()];
            im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &g, &mut cols);
            gemm(cout, g.rows(), g.cols(), wv, false, &cols, false, o, 0.0);
            if let Some(bias) = bias {
                for (co, chunk) in o.chunks_mut(g.cols()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
        let value = Tensor::new(vec![bsz, cout, g.out_h, g.out_w], out)?;
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// Transposed convolution, `w [Cin,Cout,k,k]`; the adjoint of [`Tape::conv2d`]
    /// with the same kernel, stride and padding. Output extent
    /// `(H − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::Shape(format!(
                "transposed conv weight {:?} does not match input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!("transposed conv bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        if stride == 0 || (h - 1) * stride + kh < 2 * pad + 1 || (wd - 1) * stride + kw < 2 * pad + 1 {
            return Err(Error::Shape("transposed conv output would be empty".into()));
        }
        let g = ConvGeom {
            channels: cout,
            height: (h - 1) * stride + kh - 2 * pad,
            width: (wd - 1) * stride + kw - 2 * pad,
            kernel: kh,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let in_sz = cin * h * wd;
        let out_sz = cout * g.height * g.width;
        let mut out = vec![0.0; bsz * out_sz];
        out.par_chunks_mut(out_sz).enumerate().for_each(|(bi, o)| {
            let mut cols = vec![0.0; g.rows() * g.cols()];
            gemm(g.rows(), cin, g.cols(), wv, true, &xv[bi * in_sz..(bi + 1) * in_sz], false, &mut cols, 0.0);
            col2im(&cols, &g, o);
            if let Some(bias) = bias {
                for (co, chunk) in o.chunks_mut(g.height * g.width).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
        let value = Tensor::new(vec![bsz, cout, g.height, g.width], out)?;
        self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, "conv_transpose2d")
    }

    /// Per-channel normalisation with affine `gamma`, `beta`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (bsz, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("batch norm affine terms must have shape [{c}]")));
        }
        let hw = h * w;
        let n = bsz * hw;
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "training batch norm needs at least 2 values per channel, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..bsz {
                        acc += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    mean[ch] = acc / n as f64;
                    let mut sq = 0.0;
                    for b in 0..bsz {
                        sq += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                    var[ch] = sq / n as f64;
                }
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            NormMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Shape(format!("running statistics must have {c} entries")));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![bsz, c, h, w], out)?;
        let train = stats.is_some();
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, "batch_norm")?;
        Ok((v, stats))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a), "abs")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |v| v * c, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |v| v + c, Op::AddScalar(a), "add_scalar")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Elementwise `a / b`, defined as 0 wherever `b == 0`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| if y == 0.0 { 0.0 } else { x / y }, Op::Div(a, b), "div")
    }

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (bsz, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (bsz, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} does not match {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(bsz * total * hw);
        for b in 0..bsz {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![bsz, total, h, w], out)?;
        self.push(value, Op::Concat(parts.to_vec()), "concat_channels")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    /// Sums everything but the leading (batch) axis: `[B, ...] → [B]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let bsz = *t.shape().first().ok_or_else(|| Error::Shape("sum_per_sample of a 0-D tensor".into()))?;
        let per = t.len() / bsz.max(1);
        let data = t.data().chunks(per.max(1)).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(vec![bsz], data)?;
        self.push(value, Op::SumPerSample(a), "sum_per_sample")
    }

    /// Multiplies sample `b` of `x [B, ...]` by `s[b]`.
    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let bsz = tx.shape()[0];
        if ts.shape() != [bsz] {
            return Err(Error::Shape(format!("per-sample factor {:?} for batch {bsz}", ts.shape())));
        }
        let per = tx.len() / bsz;
        let data = tx.data().chunks(per).zip(ts.data()).flat_map(|(c, &f)| c.iter().map(move |v| v * f)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::MulPerSample(x, s), "mul_per_sample")
    }

    /// `[B,1,H,W] → [B,n,H,W]` by copying the single channel.
    pub fn repeat_channels(&mut self, a: Var, n: usize) -> Result<Var> {
        let (bsz, c, h, w) = self.value(a).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("repeat_channels needs one channel, got {c}")));
        }
        let hw = h * w;
        let t = self.value(a).data();
        let mut out = Vec::with_capacity(bsz * n * hw);
        for b in 0..bsz {
            for _ in 0..n {
                out.extend_from_slice(&t[b * hw..(b + 1) * hw]);
            }
        }
        let value = Tensor::new(vec![bsz, n, h, w], out)?;
        self.push(value, Op::RepeatChannels(a, n), "repeat_channels")
    }

    /// Channel mean `[B,C,H,W] → [B,1,H,W]`.
    pub fn mean_channels(&mut self, a: Var) -> Result<Var> {
        let (bsz, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let t = self.value(a).data();
        let mut out = vec![0.0; bsz * hw];
        for b in 0..bsz {
            for ch in 0..c {
                for i in 0..hw {
                    out[b * hw + i] += t[(b * c + ch) * hw + i];
                }
            }
            out[b * hw..(b + 1) * hw].iter_mut().for_each(|v| *v /= c as f64);
        }
        let value = Tensor::new(vec![bsz, 1, h, w], out)?;
        self.push(value, Op::MeanChannels(a), "mean_channels")
    }

    /// Spatial mean per channel, `[B,C,H,W] → [B,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (bsz, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let data = self.value(a).data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![bsz, c, 1, 1], data)?;
        self.push(value, Op::GlobalAvgPool(a), "global_avg_pool")
    }

    /// Rescales each channel of `x [B,C,H,W]` by `s [B,C,1,1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (bsz, c, h, w) = self.value(x).dims4()?;
        if self.shape(s) != [bsz, c, 1, 1] {
            return Err(Error::Shape(format!("channel scale {:?} for input {:?}", self.shape(s), self.shape(x))));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(p, &f)| p.iter().map(move |v| v * f))
            .collect();
        let value = Tensor::new(vec![bsz, c, h, w], data)?;
        self.push(value, Op::ScaleChannels(x, s), "scale_channels")
    }

    /// Separable valid-mode filtering of every plane with `kernel ⊗ kernel`.
    pub fn blur(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        let (bsz, c, h, w) = self.value(x).dims4()?;
        let k = kernel.len();
        if k == 0 || k > h || k > w {
            return Err(Error::Shape(format!("{k}-tap blur does not fit a {h}x{w} plane")));
        }
        let (oh, ow) = (h + 1 - k, w + 1 - k);
        let data = self.value(x).data().chunks(h * w).flat_map(|p| blur_valid(p, h, w, kernel)).collect();
        let value = Tensor::new(vec![bsz, c, oh, ow], data)?;
        self.push(value, Op::Blur { x, kernel: kernel.to_vec() }, "blur")
    }

    /// Sign of every ReLU and abs input on the tape, in record order.
    ///
    /// Two evaluations with equal patterns lie on the same smooth piece of a
    /// piecewise-smooth function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (target, contribution) in self.node_backward(idx, &g)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor { shape: self.shape(v).to_vec(), data }
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (bsz, cin, _, _) = self.value(*x).dims4()?;
                let (cout, _, k, _) = self.value(*w).dims4()?;
                let geom = self.conv_geom(*x, k, *stride, *pad)?;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let in_sz = cin * geom.height * geom.width;
                let out_sz = cout * geom.cols();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..bsz)
                    .into_par_iter()
                    .map(|bi| {
                        let go = &gd[bi * out_sz..(bi + 1) * out_sz];
                        let mut dx = Vec::new();
                        let mut dw = Vec::new();
                        if need_w {
                            let mut cols = vec![0.0; geom.rows() * geom.cols()];
                            im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
                            dw = vec![0.0; cout * geom.rows()];
                            gemm(cout, geom.cols(), geom.rows(), go, false, &cols, true, &mut dw, 0.0);
                        }
                        if need_x {
                            let mut dcols = vec![0.0; geom.rows() * geom.cols()];
                            gemm(geom.rows(), cout, geom.cols(), wv, true, go, false, &mut dcols, 0.0);
                            dx = vec![0.0; in_sz];
                            col2im(&dcols, &geom, &mut dx);
                        }
                        (dx, dw)
                    })
                    .collect();
                if need_x {
                    let data = per_sample.iter().flat_map(|(dx, _)| dx.iter().copied()).collect();
                    out.push((*x, self.like(*x, data)));
                }
                if need_w {
                    let mut acc = vec![0.0; cout * geom.rows()];
                    for (_, dw) in &per_sample {
                        acc.iter_mut().zip(dw).for_each(|(a, d)| *a += d);
                    }
                    out.push((*w, self.like(*w, acc)));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, self.like(b, channel_sums(gd, bsz, cout, geom.cols()))));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (bsz, cin, h, wd) = self.value(*x).dims4()?;
                let (_, cout, k, _) = self.value(*w).dims4()?;
                let geom = ConvGeom {
                    channels: cout,
                    height: (h - 1) * stride + k - 2 * pad,
                    width: (wd - 1) * stride + k - 2 * pad,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                    out_h: h,
                    out_w: wd,
                };
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let in_sz = cin * h * wd;
                let out_sz = cout * geom.height * geom.width;
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..bsz)
                    .into_par_iter()
                    .map(|bi| {
                        let mut dcols = vec![0.0; geom.rows() * geom.cols()];
                        im2col(&gd[bi * out_sz..(bi + 1) * out_sz], &geom, &mut dcols);
                        let mut dx = Vec::new();
                        let mut dw = Vec::new();
                        if need_x {
                            dx = vec![0.0; in_sz];
                            gemm(cin, geom.rows(), geom.cols(), wv, false, &dcols, false, &mut dx, 0.0);
                        }
                        if need_w {
                            dw = vec![0.0; cin * geom.rows()];
                            gemm(cin, geom.cols(), geom.rows(), &xv[bi * in_sz..(bi + 1) * in_sz], false, &dcols, true, &mut dw, 0.0);
                        }
                        (dx, dw)
                    })
                    .collect();
                if need_x {
                    let data = per_sample.iter().flat_map(|(dx, _)| dx.iter().copied()).collect();
                    out.push((*x, self.like(*x, data)));
                }
                if need_w {
                    let mut acc = vec![0.0; cin * geom.rows()];
                    for (_, dw) in &per_sample {
                        acc.iter_mut().zip(dw).for_each(|(a, d)| *a += d);
                    }
                    out.push((*w, self.like(*w, acc)));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, self.like(b, channel_sums(gd, bsz, cout, geom.height * geom.width))));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (bsz, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let n = (bsz * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *train {
                                    gv[ch] * inv_std[ch] / n * (n * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gd[i] * gv[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    out.push((*x, self.like(*x, dx)));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, self.like(*gamma, dgamma)));
                }
                if self.rg(*beta) {
                    out.push((*beta, self.like(*beta, dbeta)));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                out.push((*a, self.like(*a, gd.iter().zip(av).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push((*a, self.like(*a, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                out.push((*a, self.like(*a, gd.iter().zip(av).map(|(g, &v)| g * sign(v)).collect())));
            }
            Op::Add(a, b) => {
                self.push_if(&mut out, *a, gd.to_vec());
                self.push_if(&mut out, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.push_if(&mut out, *a, gd.to_vec());
                self.push_if(&mut out, *b, gd.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, self.like(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect())));
                }
                if self.rg(*b) {
                    out.push((*b, self.like(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect())));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d = gd.iter().zip(bv).map(|(g, &y)| if y == 0.0 { 0.0 } else { g / y }).collect();
                    out.push((*a, self.like(*a, d)));
                }
                if self.rg(*b) {
                    let d = gd
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (&x, &y))| if y == 0.0 { 0.0 } else { -g * x / (y * y) })
                        .collect();
                    out.push((*b, self.like(*b, d)));
                }
            }
            Op::Scale(a, c) => out.push((*a, self.like(*a, gd.iter().map(|g| g * c).collect()))),
            Op::AddScalar(a) => out.push((*a, self.like(*a, gd.to_vec()))),
            Op::Concat(parts) => {
                let (bsz, _, h, w) = node.value.dims4()?;
                let hw = h * w;
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(bsz * c * hw);
                        for b in 0..bsz {
                            let start = (b * total + offset) * hw;
                            d.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        out.push((p, self.like(p, d)));
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                out.push((*a, self.like(*a, vec![gd[0]; n])));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                out.push((*a, self.like(*a, vec![gd[0] / n as f64; n])));
            }
            Op::SumPerSample(a) => {
                let t = self.value(*a);
                let per = t.len() / gd.len().max(1);
                out.push((*a, self.like(*a, gd.iter().flat_map(|&g| std::iter::repeat_n(g, per)).collect())));
            }
            Op::MulPerSample(x, s) => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let per = xv.len() / sv.len();
                if self.rg(*x) {
                    let d = gd.chunks(per).zip(sv).flat_map(|(c, &f)| c.iter().map(move |g| g * f)).collect();
                    out.push((*x, self.like(*x, d)));
                }
                if self.rg(*s) {
                    let d = gd.chunks(per).zip(xv.chunks(per)).map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
                    out.push((*s, self.like(*s, d)));
                }
            }
            Op::RepeatChannels(a, n) => {
                let (bsz, _, h, w) = self.value(*a).dims4()?;
                let hw = h * w;
                let mut d = vec![0.0; bsz * hw];
                for b in 0..bsz {
                    for ch in 0..*n {
                        for i in 0..hw {
                            d[b * hw + i] += gd[(b * n + ch) * hw + i];
                        }
                    }
                }
                out.push((*a, self.like(*a, d)));
            }
            Op::MeanChannels(a) => {
                let (bsz, c, h, w) = self.value(*a).dims4()?;
                let hw = h * w;
                let mut d = vec![0.0; bsz * c * hw];
                for b in 0..bsz {
                    for ch in 0..c {
                        for i in 0..hw {
                            d[(b * c + ch) * hw + i] = gd[b * hw + i] / c as f64;
                        }
                    }
                }
                out.push((*a, self.like(*a, d)));
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.value(*a).dims4()?;
                let hw = h * w;
                out.push((*a, self.like(*a, gd.iter().flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw)).collect())));
            }
            Op::ScaleChannels(x, s) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.rg(*x) {
                    let d = gd.chunks(hw).zip(sv).flat_map(|(c, &f)| c.iter().map(move |g| g * f)).collect();
                    out.push((*x, self.like(*x, d)));
                }
                if self.rg(*s) {
                    let d = gd.chunks(hw).zip(xv.chunks(hw)).map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
                    out.push((*s, self.like(*s, d)));
                }
            }
            Op::Blur { x, kernel } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let k = kernel.len();
                let plane = (h + 1 - k) * (w + 1 - k);
                let d = gd.chunks(plane).flat_map(|p| blur_valid_adjoint(p, h, w, kernel)).collect();
                out.push((*x, self.like(*x, d)));
            }
        }
        Ok(out)
    }

    fn push_if(&self, out: &mut Vec<(Var, Tensor)>, v: Var, data: Vec<f64>) {
        if self.rg(v) {
            out.push((v, self.like(v, data)));
        }
    }
}

fn channel_sums(g: &[f64], bsz: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut acc = vec![0.0; c];
    for b in 0..bsz {
        for (ch, a) in acc.iter_mut().enumerate() {
            *a += g[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
    }
    acc
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
