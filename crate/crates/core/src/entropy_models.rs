//! Probability models for quantized latents and their rates in bits.
//!
//! [`FactorizedDensity`] is a per-channel monotone cumulative built from a
//! stack of non-negative matrices, biases and `tanh` gates, squashed by a
//! final sigmoid. Its parameters live in a [`ParamStore`] under a prefix:
//! `{prefix}.m{l}` `(C, n_out, n_in)`, `{prefix}.b{l}` `(C, n_out)` and, for
//! every layer but the last, `{prefix}.a{l}` `(C, n_out)`.
//!
//! [`GaussianParams`] holds per-element mean and scale for the feature slices.
//! Both models integrate their density over the unit bin around each
//! quantized value and floor the result at [`P_MIN`].

use crate::error::{shape_err, HscError, Result};
use crate::numerics::autodiff::{gaussian_bin_mass, sigmoid, sigmoid_diff};
use crate::numerics::{std_normal_cdf, uniform_noise, Activation, RngState, Tensor, Var};
use crate::params::{Ctx, ParamStore};
use crate::range_coder::{CdfTable, SYMBOL_MAX, SYMBOL_MIN};

pub const P_MIN: f64 = 1.0 / 65536.0;
pub const SIGMA_MIN: f64 = 0.01;
/// Smallest escape mass handed to the table builder, so every table can code
/// out-of-range symbols.
const MIN_TAIL: f64 = 1e-12;
/// Beyond this many standard deviations a table edge is treated as exactly
/// 0 or 1 (the tail is far below one count of 2^-16).
const TAIL_Z: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-1/2, 1/2)` noise; training only.
    Noise,
    /// Round half away from zero; used for coding.
    Round,
}

/// Nearest integer, halves away from zero; negative zero becomes zero so
/// decoded and encoder-side values agree bit for bit.
pub fn round_half_away(v: f64) -> f64 {
    v.round() + 0.0
}

pub fn quantize(v: &Tensor, mode: QuantMode, rng: &mut RngState) -> Tensor {
    match mode {
        QuantMode::Round => v.map(round_half_away),
        QuantMode::Noise => {
            let u = uniform_noise(v.shape(), rng);
            v.add(&u).expect("same shape")
        }
    }
}

pub fn rate_bits(probs: &Tensor) -> Result<f64> {
    let mut bits = 0.0;
    for (index, &p) in probs.data().iter().enumerate() {
        if p.is_nan() || p <= 0.0 {
            return Err(HscError::NonPositiveProbability { index, value: p });
        }
        bits -= p.log2();
    }
    Ok(bits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedDensity {
    prefix: String,
    channels: usize,
    widths: Vec<usize>,
}

impl FactorizedDensity {
    /// `hidden` are the inner widths; the stack maps 1 -> hidden... -> 1.
    pub fn new(prefix: &str, channels: usize, hidden: &[usize]) -> Self {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        FactorizedDensity {
            prefix: prefix.to_string(),
            channels,
            widths,
        }
    }

    /// Four layers of width three.
    pub fn standard(prefix: &str, channels: usize) -> Self {
        Self::new(prefix, channels, &[3, 3, 3])
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn name(&self, kind: char, l: usize) -> String {
        format!("{}.{kind}{l}", self.prefix)
    }

    fn dims(&self, l: usize) -> (usize, usize) {
        (self.widths[l + 1], self.widths[l])
    }

    /// Initializes a density of roughly `init_scale` width: constant matrix
    /// entries, uniform biases in `[-1/2, 1/2)`, zero gates.
    pub fn init_params(&self, store: &mut ParamStore, init_scale: f64, rng: &mut RngState) {
        let scale = init_scale.powf(1.0 / self.layers() as f64);
        for l in 0..self.layers() {
            let (nout, nin) = self.dims(l);
            let c = self.channels;
            store.insert(
                self.name('m', l),
                Tensor::full(&[c, nout, nin], 1.0 / scale / nout as f64),
            );
            let b: Vec<f64> = (0..c * nout).map(|_| rng.uniform() - 0.5).collect();
            store.insert(
                self.name('b', l),
                Tensor::new(vec![c, nout], b).expect("sized"),
            );
            if l + 1 < self.layers() {
                store.insert(self.name('a', l), Tensor::zeros(&[c, nout]));
            }
        }
    }

    /// Parameters that make every channel's cumulative exactly the standard
    /// logistic CDF: each matrix routes its first input to its first output.
    pub fn logistic_params(&self, store: &mut ParamStore) {
        for l in 0..self.layers() {
            let (nout, nin) = self.dims(l);
            let c = self.channels;
            let mut m = Tensor::zeros(&[c, nout, nin]);
            for ch in 0..c {
                m.data_mut()[ch * nout * nin] = 1.0;
            }
            store.insert(self.name('m', l), m);
            store.insert(self.name('b', l), Tensor::zeros(&[c, nout]));
            if l + 1 < self.layers() {
                store.insert(self.name('a', l), Tensor::zeros(&[c, nout]));
            }
        }
    }

    /// Projects matrices onto the non-negative orthant, which keeps the
    /// cumulative monotone. Called after every optimizer step.
    pub fn project(&self, store: &mut ParamStore) {
        for l in 0..self.layers() {
            if let Some(m) = store.get_mut(&self.name('m', l)) {
                m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    /// Pre-sigmoid cumulative `logit c(x)` for `x` of shape `(C, P)`.
    pub fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(shape_err("factorized density", &shape, &[self.channels]));
        }
        let mut h = ctx.g.reshape(x, &[shape[0], 1, shape[1]])?;
        for l in 0..self.layers() {
            let m = ctx.p(&self.name('m', l))?;
            let b = ctx.p(&self.name('b', l))?;
            h = ctx.g.channel_matvec(h, m, b)?;
            if l + 1 < self.layers() {
                let a = ctx.p(&self.name('a', l))?;
                h = ctx.g.channel_gate(h, a)?;
            }
        }
        ctx.g.reshape(h, &shape)
    }

    /// Floored bin probabilities `c(v + 1/2) - c(v - 1/2)` for `v (C, P)`.
    pub fn bin_probs(&self, ctx: &mut Ctx, v: Var) -> Result<Var> {
        let half = ctx.constant(Tensor::full(ctx.g.shape(v), 0.5));
        let up = ctx.g.add(v, half)?;
        let lo = ctx.g.sub(v, half)?;
        let lu = self.logits(ctx, up)?;
        let ll = self.logits(ctx, lo)?;
        let p = ctx.g.sigmoid_diff(lu, ll)?;
        Ok(ctx.g.clamp_min(p, P_MIN))
    }

    fn logit_values(&self, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let xv = ctx.constant(x);
        let l = self.logits(&mut ctx, xv)?;
        Ok(ctx.value(l).clone())
    }

    /// Cumulative `c(x)` for `x (C, P)`.
    pub fn cdf(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.logit_values(store, x.clone())?.map(sigmoid))
    }

    /// Unfloored masses of the integer bins `lo..=hi` per channel, plus the
    /// mass of both tails outside `[lo - 1/2, hi + 1/2]`.
    pub fn bin_masses(
        &self,
        store: &ParamStore,
        lo: i32,
        hi: i32,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let n = (hi - lo + 2) as usize;
        let edges: Vec<f64> = (0..n).map(|i| lo as f64 - 0.5 + i as f64).collect();
        let c = self.channels;
        let x = Tensor::new(
            vec![c, n],
            (0..c).flat_map(|_| edges.iter().copied()).collect(),
        )?;
        let logits = self.logit_values(store, x)?;
        let mut masses = Vec::with_capacity(c);
        let mut tails = Vec::with_capacity(c);
        for row in logits.data().chunks(n) {
            masses.push(row.windows(2).map(|w| sigmoid_diff(w[1], w[0])).collect());
            tails.push(sigmoid(row[0]) + sigmoid(-row[n - 1]));
        }
        Ok((masses, tails))
    }

    /// One coding table per channel over the default symbol range.
    pub fn cdf_tables(&self, store: &ParamStore) -> Result<Vec<CdfTable>> {
        let (masses, tails) = self.bin_masses(store, SYMBOL_MIN, SYMBOL_MAX)?;
        masses
            .iter()
            .zip(tails)
            .map(|(m, t)| CdfTable::build(SYMBOL_MIN, m, t.max(MIN_TAIL)))
            .collect()
    }
}

/// Floored bin probabilities of `v_hat (C, P)` under a factorized density.
pub fn factorized_bin_prob(
    model: &FactorizedDensity,
    store: &ParamStore,
    v_hat: &Tensor,
) -> Result<Tensor> {
    let mut ctx = Ctx::frozen(store);
    let v = ctx.constant(v_hat.clone());
    let p = model.bin_probs(&mut ctx, v)?;
    Ok(ctx.value(p).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    mu: Tensor,
    sigma: Tensor,
}

impl GaussianParams {
    /// Scales below [`SIGMA_MIN`] are raised to it.
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(shape_err("gaussian params", mu.shape(), sigma.shape()));
        }
        Ok(GaussianParams {
            mu,
            sigma: sigma.map(|s| s.max(SIGMA_MIN)),
        })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    /// One table per element over the default symbol range.
    pub fn cdf_tables(&self) -> Result<Vec<CdfTable>> {
        let n = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;
        let first_edge = SYMBOL_MIN as f64 - 0.5;
        let mut below = vec![0.0; n + 1];
        let mut above = vec![0.0; n + 1];
        let mut probs = vec![0.0; n];
        self.mu
            .data()
            .iter()
            .zip(self.sigma.data())
            .map(|(&m, &s)| {
                // edges farther than TAIL_Z from the mean are exactly 0 or 1;
                // the tail test below is exact, the window only bounds it
                let lo = ((m - TAIL_Z * s - first_edge).floor() - 1.0).clamp(0.0, (n + 1) as f64)
                    as usize;
                let hi = ((m + TAIL_Z * s - first_edge).ceil() + 2.0).clamp(0.0, (n + 1) as f64)
                    as usize;
                below[..lo].fill(0.0);
                above[..lo].fill(1.0);
                below[hi..].fill(1.0);
                above[hi..].fill(0.0);
                // mass below and above every bin edge, each from its own tail
                for e in lo..hi {
                    let z = (first_edge + e as f64 - m) / s;
                    (below[e], above[e]) = if z < -TAIL_Z {
                        (0.0, 1.0)
                    } else if z > TAIL_Z {
                        (1.0, 0.0)
                    } else if z <= 0.0 {
                        let b = std_normal_cdf(z);
                        (b, 1.0 - b)
                    } else {
                        let a = std_normal_cdf(-z);
                        (1.0 - a, a)
                    };
                }
                probs.fill(0.0);
                for i in lo.saturating_sub(1)..hi.min(n) {
                    let mid = SYMBOL_MIN as f64 + i as f64 - m;
                    probs[i] = if mid > 0.0 {
                        above[i] - above[i + 1]
                    } else {
                        below[i + 1] - below[i]
                    };
                }
                let tail = below[0] + above[n];
                CdfTable::build(SYMBOL_MIN, &probs, tail.max(MIN_TAIL))
            })
            .collect()
    }
}

/// Floored bin probabilities of `y_hat` under `N(mu, sigma^2)`.
pub fn gaussian_bin_prob(params: &GaussianParams, y_hat: &Tensor) -> Result<Tensor> {
    if y_hat.shape() != params.mu.shape() {
        return Err(shape_err(
            "gaussian_bin_prob",
            y_hat.shape(),
            params.mu.shape(),
        ));
    }
    let data = y_hat
        .data()
        .iter()
        .zip(params.mu.data())
        .zip(params.sigma.data())
        .map(|((&y, &m), &s)| gaussian_bin_mass(y, m, s).max(P_MIN))
        .collect();
    Tensor::new(y_hat.shape().to_vec(), data)
}

/// Graph form: scale from an unconstrained input via softplus, floored at
/// [`SIGMA_MIN`] (zero gradient below the floor).
pub fn sigma_from_raw(ctx: &mut Ctx, raw: Var) -> Var {
    let sp = ctx.g.act(raw, Activation::Softplus);
    ctx.g.clamp_min(sp, SIGMA_MIN)
}

/// Graph form of the floored Gaussian bin probability.
pub fn gaussian_bin_probs(ctx: &mut Ctx, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let p = ctx.g.gaussian_bin_prob(y, mu, sigma)?;
    Ok(ctx.g.clamp_min(p, P_MIN))
}
