//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed as nodes
//! are added) and [`Graph::backward`] replays the tape in reverse. Leaves are
//! either trainable parameters (named, gradient tracked), differentiable
//! inputs, or constants. Nodes whose inputs are all constants carry no
//! gradient and are skipped during the backward sweep.

use std::collections::BTreeMap;

use super::normal::{std_normal_cdf, std_normal_pdf};
use super::tensor::Tensor;
use crate::error::{shape_err, HscError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Silu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// Probability mass of the unit bin centred on `y` under `N(mu, sigma^2)`,
/// evaluated on the side of the mean where the CDF difference does not cancel.
pub fn gaussian_bin_mass(y: f64, mu: f64, sigma: f64) -> f64 {
    let d = y - mu;
    let upper = (d + 0.5) / sigma;
    let lower = (d - 0.5) / sigma;
    if d > 0.0 {
        std_normal_cdf(-lower) - std_normal_cdf(-upper)
    } else {
        std_normal_cdf(upper) - std_normal_cdf(lower)
    }
}

/// `sigmoid(upper) - sigmoid(lower)` without cancellation in the upper tail.
pub fn sigmoid_diff(upper: f64, lower: f64) -> f64 {
    if upper + lower > 0.0 {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    PoolMean(Var, usize),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    BroadcastSpatial(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Act(Var, Activation),
    ClampMin(Var, f64),
    ChannelMatVec {
        x: Var,
        h: Var,
        b: Var,
    },
    ChannelGate {
        x: Var,
        a: Var,
    },
    GaussianBinProb {
        y: Var,
        mu: Var,
        sigma: Var,
    },
    SigmoidDiff {
        upper: Var,
        lower: Var,
    },
    NegLog2Sum(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    MeanSq(Var),
    Sqrt(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, factor), ng)
    }

    /// `w x + b` for a vector `x` of shape `(n)` and `w` of shape `(out, n)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        if xs.shape().len() != 1 || ws.shape().len() != 2 || ws.shape()[1] != xs.len() {
            return Err(shape_err("linear", xs.shape(), ws.shape()));
        }
        let col = xs.reshape(&[xs.len(), 1])?;
        let mut out = ws.matmul(&col)?.reshape(&[ws.shape()[0]])?;
        if let Some(b) = b {
            out = out.add(self.value(b))?;
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = self
            .value(x)
            .conv2d(self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).upsample2x()?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), ng))
    }

    pub fn pool_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = self.value(x).pool_mean(k)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::PoolMean(x, k), ng))
    }

    /// Per-channel `x * scale[c] + shift[c]` on a `(C, H, W)` map.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.value(x);
        let (sc, sh) = (self.value(scale), self.value(shift));
        if xs.shape().len() != 3 || sc.shape() != [xs.shape()[0]] || sh.shape() != sc.shape() {
            return Err(shape_err("channel_affine", xs.shape(), sc.shape()));
        }
        let plane = xs.shape()[1] * xs.shape()[2];
        let mut out = xs.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (a, b) = (sc.data()[c], sh.data()[c]);
            chunk.iter_mut().for_each(|v| *v = *v * a + b);
        }
        let ng = self.ng(&[x, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, ng))
    }

    /// `(C) -> (C, h, w)` by spatial replication.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vs = self.value(v);
        if vs.shape().len() != 1 {
            return Err(shape_err("broadcast_spatial", vs.shape(), &[h, w]));
        }
        let c = vs.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &val in vs.data() {
            data.extend(std::iter::repeat_n(val, h * w));
        }
        let out = Tensor::new(vec![c, h, w], data)?;
        let ng = self.ng(&[v]);
        Ok(self.push(out, Op::BroadcastSpatial(v), ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&vals)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, end)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Slice(x, start), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let ng = self.ng(&[x]);
        self.push(out, Op::Act(x, kind), ng)
    }

    /// `max(x, min)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let out = self.value(x).map(|v| v.max(min));
        let ng = self.ng(&[x]);
        self.push(out, Op::ClampMin(x, min), ng)
    }

    /// Batched per-channel affine map: `x (C, n_in, P)`, `h (C, n_out, n_in)`,
    /// `b (C, n_out)` gives `(C, n_out, P)`.
    pub fn channel_matvec(&mut self, x: Var, h: Var, b: Var) -> Result<Var> {
        let (xs, hs, bs) = (self.value(x), self.value(h), self.value(b));
        if xs.shape().len() != 3
            || hs.shape().len() != 3
            || hs.shape()[0] != xs.shape()[0]
            || hs.shape()[2] != xs.shape()[1]
            || bs.shape() != [hs.shape()[0], hs.shape()[1]]
        {
            return Err(shape_err("channel_matvec", xs.shape(), hs.shape()));
        }
        let (c, nin, p) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let nout = hs.shape()[1];
        let mut out = vec![0.0; c * nout * p];
        for ch in 0..c {
            for i in 0..nout {
                let row = &mut out[(ch * nout + i) * p..(ch * nout + i + 1) * p];
                row.iter_mut().for_each(|v| *v = bs.data()[ch * nout + i]);
                for j in 0..nin {
                    let hv = hs.data()[(ch * nout + i) * nin + j];
                    let xrow = &xs.data()[(ch * nin + j) * p..(ch * nin + j + 1) * p];
                    for (o, &xv) in row.iter_mut().zip(xrow) {
                        *o += hv * xv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, nout, p], out)?;
        let ng = self.ng(&[x, h, b]);
        Ok(self.push(out, Op::ChannelMatVec { x, h, b }, ng))
    }

    /// `x + tanh(a[c, j]) * tanh(x[c, j, p])` for `x (C, n, P)` and `a (C, n)`.
    pub fn channel_gate(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xs, as_) = (self.value(x), self.value(a));
        if xs.shape().len() != 3 || as_.shape() != &xs.shape()[..2] {
            return Err(shape_err("channel_gate", xs.shape(), as_.shape()));
        }
        let p = xs.shape()[2];
        let mut out = xs.clone();
        for (row, &av) in out.data_mut().chunks_mut(p).zip(as_.data()) {
            let ta = av.tanh();
            row.iter_mut().for_each(|v| *v += ta * v.tanh());
        }
        let ng = self.ng(&[x, a]);
        Ok(self.push(out, Op::ChannelGate { x, a }, ng))
    }

    /// Mass of the unit bin around each `y` under `N(mu, sigma^2)`.
    pub fn gaussian_bin_prob(&mut self, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (ys, ms, ss) = (self.value(y), self.value(mu), self.value(sigma));
        if ys.shape() != ms.shape() || ys.shape() != ss.shape() {
            return Err(shape_err("gaussian_bin_prob", ys.shape(), ms.shape()));
        }
        let data = ys
            .data()
            .iter()
            .zip(ms.data())
            .zip(ss.data())
            .map(|((&yv, &m), &s)| gaussian_bin_mass(yv, m, s))
            .collect();
        let out = Tensor::new(ys.shape().to_vec(), data)?;
        let ng = self.ng(&[y, mu, sigma]);
        Ok(self.push(out, Op::GaussianBinProb { y, mu, sigma }, ng))
    }

    /// `sigmoid(upper) - sigmoid(lower)` elementwise.
    pub fn sigmoid_diff(&mut self, upper: Var, lower: Var) -> Result<Var> {
        let (us, ls) = (self.value(upper), self.value(lower));
        if us.shape() != ls.shape() {
            return Err(shape_err("sigmoid_diff", us.shape(), ls.shape()));
        }
        let data = us
            .data()
            .iter()
            .zip(ls.data())
            .map(|(&u, &l)| sigmoid_diff(u, l))
            .collect();
        let out = Tensor::new(us.shape().to_vec(), data)?;
        let ng = self.ng(&[upper, lower]);
        Ok(self.push(out, Op::SigmoidDiff { upper, lower }, ng))
    }

    /// `sum(-log2 p)`, i.e. the ideal code length in bits.
    pub fn neg_log2_sum(&mut self, p: Var) -> Result<Var> {
        let ps = self.value(p);
        if let Some((index, &value)) = ps
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0 || v.is_nan())
        {
            return Err(HscError::NonPositiveProbability { index, value });
        }
        let bits: f64 = ps.data().iter().map(|v| -v.log2()).sum();
        let ng = self.ng(&[p]);
        Ok(self.push(Tensor::scalar(bits), Op::NegLog2Sum(p), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_sq();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumSq(x), ng)
    }

    pub fn mean_sq(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let s = if xs.is_empty() {
            0.0
        } else {
            xs.sum_sq() / xs.len() as f64
        };
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::MeanSq(x), ng)
    }

    /// Elementwise square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0).sqrt());
        let ng = self.ng(&[x]);
        self.push(out, Op::Sqrt(x), ng)
    }

    /// Sum of several scalars, weighted.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let term = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.constant(Tensor::scalar(0.0))))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let seed_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.scale(*f))?,
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (out, n) = (ws.shape()[0], ws.shape()[1]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; n];
                    for i in 0..out {
                        let gi = g.data()[i];
                        for (d, &wv) in dx.iter_mut().zip(&ws.data()[i * n..(i + 1) * n]) {
                            *d += gi * wv;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(dx))?;
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; out * n];
                    for i in 0..out {
                        let gi = g.data()[i];
                        for (d, &xv) in dw[i * n..(i + 1) * n].iter_mut().zip(xs.data()) {
                            *d = gi * xv;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![out, n], dw)?)?;
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = self.value(*x).conv2d_backward(
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Upsample2x(x) => self.accumulate(grads, *x, Tensor::upsample2x_backward(g)?)?,
            Op::PoolMean(x, k) => self.accumulate(grads, *x, Tensor::pool_mean_backward(g, *k)?)?,
            Op::ChannelAffine { x, scale, shift } => {
                let xs = self.value(*x);
                let sc = self.value(*scale);
                let c = xs.shape()[0];
                let plane = xs.len() / c.max(1);
                let mut dx = g.clone();
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ch in 0..c {
                    let gp = &g.data()[ch * plane..(ch + 1) * plane];
                    let xp = &xs.data()[ch * plane..(ch + 1) * plane];
                    dshift[ch] = gp.iter().sum();
                    dscale[ch] = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
                    let s = sc.data()[ch];
                    dx.data_mut()[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v *= s);
                }
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *scale, Tensor::from_vec(dscale))?;
                self.accumulate(grads, *shift, Tensor::from_vec(dshift))?;
            }
            Op::BroadcastSpatial(v) => {
                let c = self.value(*v).len();
                let plane = g.len() / c.max(1);
                let d: Vec<f64> = g
                    .data()
                    .chunks(plane.max(1))
                    .map(|p| p.iter().sum())
                    .collect();
                self.accumulate(grads, *v, Tensor::from_vec(d))?;
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let lead = self.value(*p).shape()[0];
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_channels(start, start + lead)?)?;
                    }
                    start += lead;
                }
            }
            Op::Slice(x, start) => {
                if self.wants(*x) {
                    let xs = self.value(*x);
                    let inner = xs.len() / xs.shape()[0].max(1);
                    let mut d = Tensor::zeros(xs.shape());
                    d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, d)?;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?)?;
            }
            Op::Act(x, kind) => {
                let d = self.value(*x).map(|v| kind.derivative(v)).mul(g)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::ClampMin(x, min) => {
                let xs = self.value(*x);
                let data = xs
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > *min { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), data)?)?;
            }
            Op::ChannelMatVec { x, h, b } => {
                let (xs, hs) = (self.value(*x), self.value(*h));
                let (c, nin, p) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let nout = hs.shape()[1];
                let mut dx = vec![0.0; xs.len()];
                let mut dh = vec![0.0; hs.len()];
                let mut db = vec![0.0; c * nout];
                for ch in 0..c {
                    for i in 0..nout {
                        let grow = &g.data()[(ch * nout + i) * p..(ch * nout + i + 1) * p];
                        db[ch * nout + i] = grow.iter().sum();
                        for j in 0..nin {
                            let hv = hs.data()[(ch * nout + i) * nin + j];
                            let xrow = &xs.data()[(ch * nin + j) * p..(ch * nin + j + 1) * p];
                            dh[(ch * nout + i) * nin + j] =
                                grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                            let drow = &mut dx[(ch * nin + j) * p..(ch * nin + j + 1) * p];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += hv * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *h, Tensor::new(hs.shape().to_vec(), dh)?)?;
                self.accumulate(grads, *b, Tensor::new(vec![c, nout], db)?)?;
            }
            Op::ChannelGate { x, a } => {
                let (xs, as_) = (self.value(*x), self.value(*a));
                let p = xs.shape()[2];
                let mut dx = vec![0.0; xs.len()];
                let mut da = vec![0.0; as_.len()];
                let rows = dx
                    .chunks_mut(p)
                    .zip(xs.data().chunks(p).zip(g.data().chunks(p)));
                for ((&av, dr), (dxr, (xr, gr))) in as_.data().iter().zip(&mut da).zip(rows) {
                    let ta = av.tanh();
                    let mut acc = 0.0;
                    for ((d, &xv), &gv) in dxr.iter_mut().zip(xr).zip(gr) {
                        let tx = xv.tanh();
                        *d = gv * (1.0 + ta * (1.0 - tx * tx));
                        acc += gv * tx;
                    }
                    *dr = acc * (1.0 - ta * ta);
                }
                self.accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *a, Tensor::new(as_.shape().to_vec(), da)?)?;
            }
            Op::GaussianBinProb { y, mu, sigma } => {
                let (ys, ms, ss) = (self.value(*y), self.value(*mu), self.value(*sigma));
                let n = ys.len();
                let mut dy = vec![0.0; n];
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    let s = ss.data()[i];
                    let d = ys.data()[i] - ms.data()[i];
                    let u = (d + 0.5) / s;
                    let l = (d - 0.5) / s;
                    let (pu, pl) = (std_normal_pdf(u), std_normal_pdf(l));
                    dy[i] = g.data()[i] * (pu - pl) / s;
                    ds[i] = -g.data()[i] * (u * pu - l * pl) / s;
                }
                let shape = ys.shape().to_vec();
                if self.wants(*mu) {
                    let dmu = dy.iter().map(|v| -v).collect();
                    self.accumulate(grads, *mu, Tensor::new(shape.clone(), dmu)?)?;
                }
                self.accumulate(grads, *y, Tensor::new(shape.clone(), dy)?)?;
                self.accumulate(grads, *sigma, Tensor::new(shape, ds)?)?;
            }
            Op::SigmoidDiff { upper, lower } => {
                let (us, ls) = (self.value(*upper), self.value(*lower));
                let dsig = |x: f64| {
                    let s = sigmoid(x);
                    s * (1.0 - s)
                };
                let du = us.map(dsig).mul(g)?;
                let dl = ls.map(|v| -dsig(v)).mul(g)?;
                self.accumulate(grads, *upper, du)?;
                self.accumulate(grads, *lower, dl)?;
            }
            Op::NegLog2Sum(p) => {
                let gv = g.item();
                let d = self.value(*p).map(|v| -gv / (v * std::f64::consts::LN_2));
                self.accumulate(grads, *p, d)?;
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, d)?;
            }
            Op::Mean(x) => {
                let xs = self.value(*x);
                let d = Tensor::full(xs.shape(), g.item() / xs.len().max(1) as f64);
                self.accumulate(grads, *x, d)?;
            }
            Op::SumSq(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, self.value(*x).scale(2.0 * gv))?;
            }
            Op::MeanSq(x) => {
                let xs = self.value(*x);
                let f = 2.0 * g.item() / xs.len().max(1) as f64;
                self.accumulate(grads, *x, xs.scale(f))?;
            }
            Op::Sqrt(x) => {
                let out = &node.value;
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&r, &gv)| if r > 0.0 { gv * 0.5 / r } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }

    /// Gradients of every registered parameter, keyed by name. Parameters that
    /// did not influence the loss get a zero tensor.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check(build: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
            let l = build(&mut g, &vars).unwrap();
            (g, vars, l)
        };
        let (g, vars, l) = eval(inputs);
        let grads = g.backward(l).unwrap();
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.len() {
                let h = 1e-6 * t.data()[i].abs().max(1.0);
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let (gp, _, lp) = eval(&plus);
                let (gm, _, lm) = eval(&minus);
                let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k}[{i}]: analytic {a} numeric {num}");
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        RngState::new(seed).normal_tensor(shape, 1.0)
    }

    #[test]
    fn conv_pool_upsample_chain() {
        check(
            |g, v| {
                let c = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let a = g.act(c, Activation::Silu);
                let u = g.upsample2x(a)?;
                let p = g.pool_mean(u, 4)?;
                Ok(g.sum_sq(p))
            },
            &[rand(&[2, 8, 8], 1), rand(&[3, 2, 3, 3], 2), rand(&[3], 3)],
        );
    }

    #[test]
    fn linear_affine_broadcast_concat() {
        check(
            |g, v| {
                let l = g.linear(v[0], v[1], Some(v[2]))?;
                let sc = g.slice(l, 0, 2)?;
                let sh = g.slice(l, 2, 4)?;
                let m = g.channel_affine(v[3], sc, sh)?;
                let b = g.broadcast_spatial(sc, 3, 3)?;
                let cat = g.concat(&[m, b])?;
                let t = g.act(cat, Activation::Tanh);
                Ok(g.mean_sq(t))
            },
            &[
                rand(&[5], 4),
                rand(&[4, 5], 5),
                rand(&[4], 6),
                rand(&[2, 3, 3], 7),
            ],
        );
    }

    #[test]
    fn gaussian_bin_rate() {
        let sigma = rand(&[6], 10).map(|v| v.abs() + 0.3);
        check(
            |g, v| {
                let p = g.gaussian_bin_prob(v[0], v[1], v[2])?;
                g.neg_log2_sum(p)
            },
            &[rand(&[6], 8).scale(2.0), rand(&[6], 9), sigma],
        );
    }

    #[test]
    fn factorized_pieces() {
        check(
            |g, v| {
                let h = g.channel_matvec(v[0], v[1], v[2])?;
                let gated = g.channel_gate(h, v[3])?;
                let lo = g.scale(gated, 0.7);
                let p = g.sigmoid_diff(gated, lo)?;
                let s = g.sqrt(p);
                Ok(g.sum(s))
            },
            &[
                rand(&[2, 1, 3], 11).map(f64::abs),
                rand(&[2, 3, 1], 12).map(f64::abs),
                rand(&[2, 3], 13),
                rand(&[2, 3], 14),
            ],
        );
    }

    #[test]
    fn clamp_blocks_gradient_below_floor() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.001, 0.5]));
        let c = g.clamp_min(x, 0.01);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.param("b", &Tensor::from_vec(vec![3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        let mut grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        let pg = g.param_grads(&mut grads);
        assert_eq!(pg["b"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn nonpositive_probability_is_rejected() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![0.5, 0.0]));
        assert!(matches!(
            g.neg_log2_sum(p),
            Err(HscError::NonPositiveProbability { index: 1, .. })
        ));
    }
}
