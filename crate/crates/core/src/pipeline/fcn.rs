//! Feature compression network with the slice-wise semantic context model.
//!
//! `f` is transformed to `y` by two convolutions and split into `k` channel
//! slices. The parameters `(mu_i, sigma_i)` of slice `i` come from a context
//! network fed with the semantic prior (a linear map of the decoded style
//! codes, broadcast over space) concatenated with all previously decoded
//! slices. Slices are coded and decoded strictly in order.

use super::config::CodecConfig;
use super::layers::{conv, init_conv, init_linear, linear, quantize_var};
use crate::entropy_models::{
    gaussian_bin_prob, gaussian_bin_probs, rate_bits, round_half_away, sigma_from_raw,
    GaussianParams, QuantMode,
};
use crate::error::{shape_err, HscError, Result};
use crate::numerics::{Activation, RngState, Tensor, Var};
use crate::params::{Ctx, ParamStore};
use crate::range_coder::{decode_symbols, encode_symbols, CdfTable};

/// `softplus^-1(1)`: context networks start out predicting unit scales.
const SIGMA_BIAS: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Debug)]
pub struct Fcn {
    c_f: usize,
    c_y: usize,
    c_p: usize,
    hidden: usize,
    code_len: usize,
    h_f: usize,
    w_f: usize,
    bounds: Vec<(usize, usize)>,
    use_prior: bool,
}

pub struct FcnPass {
    pub y: Var,
    pub y_hat: Var,
    pub f_hat: Var,
    /// Total estimated rate in bits (scalar).
    pub rate: Var,
    pub slice_rates: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FcnCoded {
    pub y_hat: Tensor,
    pub f_hat: Tensor,
    pub chunks: Vec<Vec<u8>>,
    /// Rate estimate per slice, in bits.
    pub estimated_bits: Vec<f64>,
}

impl Fcn {
    pub fn new(config: &CodecConfig) -> Self {
        let [c_f, h_f, w_f] = config.feature_shape();
        Fcn {
            c_f,
            c_y: config.c_y,
            c_p: config.c_p,
            hidden: config.sce_hidden,
            code_len: config.code_len(),
            h_f,
            w_f,
            bounds: config.slice_bounds(),
            use_prior: config.use_prior,
        }
    }

    pub fn slices(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.init_transforms(store, rng);
        self.init_context(store, rng);
    }

    pub fn init_transforms(&self, store: &mut ParamStore, rng: &mut RngState) {
        init_conv(store, "fcn.enc0", self.c_y, self.c_f, 3, 2f64.sqrt(), rng);
        init_conv(store, "fcn.enc1", self.c_y, self.c_y, 3, 1.0, rng);
        init_conv(store, "fcn.dec0", self.c_y, self.c_y, 3, 2f64.sqrt(), rng);
        init_conv(store, "fcn.dec1", self.c_f, self.c_y, 3, 1.0, rng);
    }

    /// Semantic prior and slice context networks (`fcn.prior`, `fcn.sce*`).
    pub fn init_context(&self, store: &mut ParamStore, rng: &mut RngState) {
        init_linear(store, "fcn.prior", self.c_p, self.code_len, 1.0, rng);
        for (i, &(a, b)) in self.bounds.iter().enumerate() {
            let name = format!("fcn.sce{i}");
            init_conv(
                store,
                &format!("{name}.c1"),
                self.hidden,
                self.c_p + a,
                3,
                2f64.sqrt(),
                rng,
            );
            init_conv(
                store,
                &format!("{name}.c2"),
                2 * (b - a),
                self.hidden,
                3,
                0.1,
                rng,
            );
            let mut bias = vec![0.0; 2 * (b - a)];
            bias[b - a..].iter_mut().for_each(|v| *v = SIGMA_BIAS);
            store.insert(format!("{name}.c2.b"), Tensor::from_vec(bias));
        }
    }

    pub fn encode(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let want = [self.c_f, self.h_f, self.w_f];
        if ctx.g.shape(f) != want {
            return Err(shape_err("fcn input", ctx.g.shape(f), &want));
        }
        let h = conv(ctx, "fcn.enc0", f)?;
        let h = ctx.g.act(h, Activation::Silu);
        conv(ctx, "fcn.enc1", h)
    }

    pub fn decode(&self, ctx: &mut Ctx, y_hat: Var) -> Result<Var> {
        let h = conv(ctx, "fcn.dec0", y_hat)?;
        let h = ctx.g.act(h, Activation::Silu);
        conv(ctx, "fcn.dec1", h)
    }

    /// `(C_p, H_f, W_f)` prior from decoded codes, or zeros when disabled.
    pub fn prior(&self, ctx: &mut Ctx, s_hat: Var) -> Result<Var> {
        if ctx.g.shape(s_hat) != [self.code_len] {
            return Err(shape_err(
                "semantic prior",
                ctx.g.shape(s_hat),
                &[self.code_len],
            ));
        }
        if !self.use_prior {
            return Ok(ctx.constant(Tensor::zeros(&[self.c_p, self.h_f, self.w_f])));
        }
        let v = linear(ctx, "fcn.prior", s_hat)?;
        ctx.g.broadcast_spatial(v, self.h_f, self.w_f)
    }

    /// `(mu_i, sigma_i)` of slice `i` given the prior and slices `0..i`.
    pub fn slice_params(
        &self,
        ctx: &mut Ctx,
        i: usize,
        prior: Var,
        prev: &[Var],
    ) -> Result<(Var, Var)> {
        if prev.len() != i {
            return Err(HscError::SliceOrder {
                requested: i,
                expected: prev.len(),
            });
        }
        let mut parts = vec![prior];
        parts.extend_from_slice(prev);
        let input = ctx.g.concat(&parts)?;
        let name = format!("fcn.sce{i}");
        let h = conv(ctx, &format!("{name}.c1"), input)?;
        let h = ctx.g.act(h, Activation::Silu);
        let out = conv(ctx, &format!("{name}.c2"), h)?;
        let c = self.bounds[i].1 - self.bounds[i].0;
        let mu = ctx.g.slice(out, 0, c)?;
        let raw = ctx.g.slice(out, c, 2 * c)?;
        Ok((mu, sigma_from_raw(ctx, raw)))
    }

    /// Rate of already-transformed `y` given decoded codes; returns
    /// `(y_hat, total rate, per-slice rates)`.
    pub fn rate(
        &self,
        ctx: &mut Ctx,
        y: Var,
        s_hat: Var,
        mode: QuantMode,
        rng: &mut RngState,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let y_hat = quantize_var(ctx, y, mode, rng)?;
        let prior = self.prior(ctx, s_hat)?;
        let mut prev = Vec::with_capacity(self.bounds.len());
        let mut rates = Vec::with_capacity(self.bounds.len());
        for (i, &(a, b)) in self.bounds.iter().enumerate() {
            let yi = ctx.g.slice(y_hat, a, b)?;
            let (mu, sigma) = self.slice_params(ctx, i, prior, &prev)?;
            let p = gaussian_bin_probs(ctx, yi, mu, sigma)?;
            rates.push(ctx.g.neg_log2_sum(p)?);
            prev.push(yi);
        }
        let terms: Vec<(f64, Var)> = rates.iter().map(|&r| (1.0, r)).collect();
        let rate = ctx.g.weighted_sum(&terms)?;
        Ok((y_hat, rate, rates))
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        f: Var,
        s_hat: Var,
        mode: QuantMode,
        rng: &mut RngState,
    ) -> Result<FcnPass> {
        let y = self.encode(ctx, f)?;
        let (y_hat, rate, slice_rates) = self.rate(ctx, y, s_hat, mode, rng)?;
        let f_hat = self.decode(ctx, y_hat)?;
        Ok(FcnPass {
            y,
            y_hat,
            f_hat,
            rate,
            slice_rates,
        })
    }

    pub fn prior_values(&self, store: &ParamStore, s_hat: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let s = ctx.constant(s_hat.clone());
        let p = self.prior(&mut ctx, s)?;
        Ok(ctx.value(p).clone())
    }

    pub fn slice_gaussian(
        &self,
        store: &ParamStore,
        i: usize,
        prior: &Tensor,
        prev: &[Tensor],
    ) -> Result<GaussianParams> {
        let mut ctx = Ctx::frozen(store);
        let p = ctx.constant(prior.clone());
        let prev: Vec<Var> = prev.iter().map(|t| ctx.constant(t.clone())).collect();
        let (mu, sigma) = self.slice_params(&mut ctx, i, p, &prev)?;
        GaussianParams::new(ctx.value(mu).clone(), ctx.value(sigma).clone())
    }

    pub fn transform_values(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let fv = ctx.constant(f.clone());
        let y = self.encode(&mut ctx, fv)?;
        Ok(ctx.value(y).clone())
    }

    pub fn reconstruct(&self, store: &ParamStore, y_hat: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let y = ctx.constant(y_hat.clone());
        let f = self.decode(&mut ctx, y)?;
        Ok(ctx.value(f).clone())
    }

    /// Estimated bits of every slice of a rounded `y_hat` under the model.
    pub fn estimated_bits(
        &self,
        store: &ParamStore,
        y_hat: &Tensor,
        s_hat: &Tensor,
    ) -> Result<Vec<f64>> {
        let prior = self.prior_values(store, s_hat)?;
        let mut prev = Vec::new();
        let mut bits = Vec::new();
        for (i, &(a, b)) in self.bounds.iter().enumerate() {
            let yi = y_hat.slice_channels(a, b)?;
            let gp = self.slice_gaussian(store, i, &prior, &prev)?;
            bits.push(rate_bits(&gaussian_bin_prob(&gp, &yi)?)?);
            prev.push(yi);
        }
        Ok(bits)
    }

    /// Codes `f` into `k` slice chunks conditioned on decoded codes `s_hat`.
    pub fn code(&self, store: &ParamStore, f: &Tensor, s_hat: &Tensor) -> Result<FcnCoded> {
        let y = self.transform_values(store, f)?;
        if !y.is_finite() {
            return Err(HscError::NonFinite("transformed feature"));
        }
        let y_hat = y.map(round_half_away);
        let prior = self.prior_values(store, s_hat)?;
        let mut prev = Vec::with_capacity(self.bounds.len());
        let mut chunks = Vec::with_capacity(self.bounds.len());
        let mut estimated_bits = Vec::with_capacity(self.bounds.len());
        for (i, &(a, b)) in self.bounds.iter().enumerate() {
            let yi = y_hat.slice_channels(a, b)?;
            let gp = self.slice_gaussian(store, i, &prior, &prev)?;
            let tables = gp.cdf_tables()?;
            let refs: Vec<&CdfTable> = tables.iter().collect();
            let symbols: Vec<i64> = yi.data().iter().map(|&v| v as i64).collect();
            chunks.push(encode_symbols(&symbols, &refs)?);
            estimated_bits.push(rate_bits(&gaussian_bin_prob(&gp, &yi)?)?);
            prev.push(yi);
        }
        Ok(FcnCoded {
            f_hat: self.reconstruct(store, &y_hat)?,
            y_hat,
            chunks,
            estimated_bits,
        })
    }
}

/// Incremental slice decoder. Slices must be supplied in order `0..k`.
pub struct SliceDecoder<'a> {
    fcn: &'a Fcn,
    store: &'a ParamStore,
    prior: Tensor,
    decoded: Vec<Tensor>,
}

impl<'a> SliceDecoder<'a> {
    pub fn new(fcn: &'a Fcn, store: &'a ParamStore, s_hat: &Tensor) -> Result<Self> {
        Ok(SliceDecoder {
            prior: fcn.prior_values(store, s_hat)?,
            fcn,
            store,
            decoded: Vec::new(),
        })
    }

    pub fn next_slice(&self) -> usize {
        self.decoded.len()
    }

    pub fn decode_slice(&mut self, i: usize, chunk: &[u8]) -> Result<&Tensor> {
        let expected = self.decoded.len();
        if i != expected || i >= self.fcn.slices() {
            return Err(HscError::SliceOrder {
                requested: i,
                expected,
            });
        }
        let gp = self
            .fcn
            .slice_gaussian(self.store, i, &self.prior, &self.decoded)?;
        let tables = gp.cdf_tables()?;
        let refs: Vec<&CdfTable> = tables.iter().collect();
        let symbols = decode_symbols(chunk, &refs)?;
        let shape = gp.mu().shape().to_vec();
        let yi = Tensor::new(shape, symbols.into_iter().map(|v| v as f64).collect())?;
        self.decoded.push(yi);
        Ok(&self.decoded[i])
    }

    /// `(y_hat, f_hat)` once every slice has been decoded.
    pub fn finish(self) -> Result<(Tensor, Tensor)> {
        if self.decoded.len() != self.fcn.slices() {
            return Err(HscError::SliceOrder {
                requested: self.fcn.slices(),
                expected: self.decoded.len(),
            });
        }
        let refs: Vec<&Tensor> = self.decoded.iter().collect();
        let y_hat = Tensor::concat_channels(&refs)?;
        let f_hat = self.fcn.reconstruct(self.store, &y_hat)?;
        Ok((y_hat, f_hat))
    }
}
