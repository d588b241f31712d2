//! Parameter initialization and graph helpers shared by the networks.

use crate::entropy_models::{round_half_away, QuantMode};
use crate::error::Result;
use crate::numerics::{uniform_noise, RngState, Tensor, Var};
use crate::params::{Ctx, ParamStore};

/// He-style normal init scaled by `gain`, zero bias.
pub(crate) fn init_conv(
    store: &mut ParamStore,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    gain: f64,
    rng: &mut RngState,
) {
    let std = gain / ((in_c * k * k) as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        rng.normal_tensor(&[out_c, in_c, k, k], std),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[out_c]));
}

pub(crate) fn init_linear(
    store: &mut ParamStore,
    name: &str,
    out_n: usize,
    in_n: usize,
    gain: f64,
    rng: &mut RngState,
) {
    let std = gain / (in_n as f64).sqrt();
    store.insert(format!("{name}.w"), rng.normal_tensor(&[out_n, in_n], std));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out_n]));
}

/// `k x k` convolution with "same" padding.
pub(crate) fn conv(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    let k = ctx.g.shape(w)[2];
    ctx.g.conv2d(x, w, Some(b), 1, k / 2)
}

pub(crate) fn linear(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    ctx.g.linear(x, w, Some(b))
}

/// Splits a flat vector into `n` equal consecutive pieces.
pub(crate) fn split_flat(ctx: &mut Ctx, x: Var, n: usize) -> Result<Vec<Var>> {
    let len = ctx.g.shape(x)[0];
    let d = len / n;
    (0..n).map(|j| ctx.g.slice(x, j * d, (j + 1) * d)).collect()
}

/// Noise mode adds uniform noise (gradient passes through); round mode
/// replaces the value by an exactly rounded constant.
pub(crate) fn quantize_var(
    ctx: &mut Ctx,
    v: Var,
    mode: QuantMode,
    rng: &mut RngState,
) -> Result<Var> {
    match mode {
        QuantMode::Round => {
            let r = ctx.value(v).map(round_half_away);
            Ok(ctx.constant(r))
        }
        QuantMode::Noise => {
            let u = uniform_noise(ctx.g.shape(v), rng);
            let u = ctx.constant(u);
            ctx.g.add(v, u)
        }
    }
}
