//! Semantic compression network: a small perceptron reduces the flat style
//! codes to `s_r`, which is quantized and coded under a factorized density;
//! a mirror perceptron reconstructs the codes from the decoded `s_r`.

use super::config::CodecConfig;
use super::layers::{init_linear, linear, quantize_var};
use crate::entropy_models::{
    factorized_bin_prob, rate_bits, round_half_away, FactorizedDensity, QuantMode,
};
use crate::error::{shape_err, HscError, Result};
use crate::numerics::{Activation, RngState, Tensor, Var};
use crate::params::{Ctx, ParamStore};
use crate::range_coder::{decode_symbols, encode_symbols, CdfTable};

pub const DENSITY_PREFIX: &str = "scn.density";

#[derive(Clone, Debug)]
pub struct Scn {
    code_len: usize,
    hidden: usize,
    r: usize,
    density: FactorizedDensity,
}

/// Graph outputs of one SCN pass.
pub struct ScnPass {
    pub s_r: Var,
    pub s_r_hat: Var,
    pub s_hat: Var,
    /// Estimated rate in bits (scalar).
    pub rate: Var,
}

/// Result of coding one set of style codes.
#[derive(Clone, Debug)]
pub struct ScnCoded {
    pub s_r_hat: Tensor,
    pub s_hat: Tensor,
    pub chunk: Vec<u8>,
    /// Rate estimate of `s_r_hat` under the model, in bits.
    pub estimated_bits: f64,
}

impl Scn {
    pub fn new(config: &CodecConfig) -> Self {
        Scn {
            code_len: config.code_len(),
            hidden: config.scn_hidden,
            r: config.r,
            density: FactorizedDensity::standard(DENSITY_PREFIX, config.r),
        }
    }

    pub fn density(&self) -> &FactorizedDensity {
        &self.density
    }

    pub fn latent_len(&self) -> usize {
        self.r
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut RngState) {
        init_linear(
            store,
            "scn.enc0",
            self.hidden,
            self.code_len,
            2f64.sqrt(),
            rng,
        );
        init_linear(store, "scn.enc1", self.r, self.hidden, 1.0, rng);
        init_linear(store, "scn.dec0", self.hidden, self.r, 2f64.sqrt(), rng);
        init_linear(store, "scn.dec1", self.code_len, self.hidden, 1.0, rng);
        self.density.init_params(store, 10.0, rng);
    }

    pub fn encode(&self, ctx: &mut Ctx, s: Var) -> Result<Var> {
        if ctx.g.shape(s) != [self.code_len] {
            return Err(shape_err("scn input", ctx.g.shape(s), &[self.code_len]));
        }
        let h = linear(ctx, "scn.enc0", s)?;
        let h = ctx.g.act(h, Activation::Silu);
        linear(ctx, "scn.enc1", h)
    }

    pub fn decode(&self, ctx: &mut Ctx, s_r_hat: Var) -> Result<Var> {
        let h = linear(ctx, "scn.dec0", s_r_hat)?;
        let h = ctx.g.act(h, Activation::Silu);
        linear(ctx, "scn.dec1", h)
    }

    /// Encoder, quantizer (noise or rounding), rate and decoder.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        s: Var,
        mode: QuantMode,
        rng: &mut RngState,
    ) -> Result<ScnPass> {
        let s_r = self.encode(ctx, s)?;
        let s_r_hat = quantize_var(ctx, s_r, mode, rng)?;
        let column = ctx.g.reshape(s_r_hat, &[self.r, 1])?;
        let p = self.density.bin_probs(ctx, column)?;
        let rate = ctx.g.neg_log2_sum(p)?;
        let s_hat = self.decode(ctx, s_r_hat)?;
        Ok(ScnPass {
            s_r,
            s_r_hat,
            s_hat,
            rate,
        })
    }

    pub fn reconstruct(&self, store: &ParamStore, s_r_hat: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let v = ctx.constant(s_r_hat.clone());
        let s = self.decode(&mut ctx, v)?;
        Ok(ctx.value(s).clone())
    }

    pub fn estimated_bits(&self, store: &ParamStore, s_r_hat: &Tensor) -> Result<f64> {
        let p = factorized_bin_prob(&self.density, store, &s_r_hat.reshape(&[self.r, 1])?)?;
        rate_bits(&p)
    }

    pub fn code(&self, store: &ParamStore, s: &Tensor) -> Result<ScnCoded> {
        let mut ctx = Ctx::frozen(store);
        let sv = ctx.constant(s.clone());
        let s_r = self.encode(&mut ctx, sv)?;
        let s_r = ctx.value(s_r).clone();
        if !s_r.is_finite() {
            return Err(HscError::NonFinite("semantic latent"));
        }
        let s_r_hat = s_r.map(round_half_away);
        let tables = self.density.cdf_tables(store)?;
        let refs: Vec<&CdfTable> = tables.iter().collect();
        let symbols: Vec<i64> = s_r_hat.data().iter().map(|&v| v as i64).collect();
        let chunk = encode_symbols(&symbols, &refs)?;
        Ok(ScnCoded {
            s_hat: self.reconstruct(store, &s_r_hat)?,
            estimated_bits: self.estimated_bits(store, &s_r_hat)?,
            s_r_hat,
            chunk,
        })
    }

    /// Decodes a chunk to `(s_r_hat, s_hat)`.
    pub fn decode_chunk(&self, store: &ParamStore, chunk: &[u8]) -> Result<(Tensor, Tensor)> {
        let tables = self.density.cdf_tables(store)?;
        let refs: Vec<&CdfTable> = tables.iter().collect();
        let symbols = decode_symbols(chunk, &refs)?;
        let s_r_hat = Tensor::from_vec(symbols.into_iter().map(|v| v as f64).collect());
        let s_hat = self.reconstruct(store, &s_r_hat)?;
        Ok((s_r_hat, s_hat))
    }
}
