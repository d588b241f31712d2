//! Inversion encoder: residual convolutional stages at halving resolutions.
//! The last stage's output is the middle-level feature `f`; every stage's
//! output is mean-pooled to 2x2, the pooled features are concatenated and
//! `m` linear heads read one style code each.

use super::config::CodecConfig;
use super::layers::{conv, init_conv, init_linear, linear};
use super::StyleCodes;
use crate::error::{shape_err, Result};
use crate::numerics::{Activation, RngState, Tensor, Var};
use crate::params::{Ctx, ParamStore};

const POOLED: usize = 2;

#[derive(Clone, Debug)]
pub struct Gie {
    image_size: usize,
    m: usize,
    d_s: usize,
    /// `(in_channels, out_channels, resolution)` per stage.
    stages: Vec<(usize, usize, usize)>,
}

impl Gie {
    pub fn new(config: &CodecConfig) -> Self {
        let [c_f, h_f, _] = config.feature_shape();
        let mut stages = Vec::new();
        let (mut res, mut cin) = (config.image_size, 3);
        loop {
            let last = res == h_f;
            let cout = if last {
                c_f
            } else if stages.is_empty() {
                8
            } else {
                16
            };
            stages.push((cin, cout, res));
            if last {
                break;
            }
            cin = cout;
            res /= 2;
        }
        Gie {
            image_size: config.image_size,
            m: config.m,
            d_s: config.d_s,
            stages,
        }
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    fn pooled_len(&self) -> usize {
        self.stages
            .iter()
            .map(|&(_, c, _)| c * POOLED * POOLED)
            .sum()
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut RngState) {
        let last = self.stages.len() - 1;
        for (i, &(cin, cout, res)) in self.stages.iter().enumerate() {
            // the feature starts out near its bias
            let out_gain = if i == last { 0.1 } else { 1.0 };
            init_conv(
                store,
                &format!("gie.s{i}.c1"),
                cout,
                cin,
                3,
                2f64.sqrt(),
                rng,
            );
            init_conv(
                store,
                &format!("gie.s{i}.c2"),
                cout,
                cout,
                3,
                0.5 * out_gain,
                rng,
            );
            init_conv(
                store,
                &format!("gie.s{i}.skip"),
                cout,
                cin,
                1,
                out_gain,
                rng,
            );
            if i == last {
                store.insert("gie.f_bias", Tensor::zeros(&[cout, res, res]));
            }
        }
        let n = self.pooled_len();
        for j in 0..self.m {
            init_linear(store, &format!("gie.head{j}"), self.d_s, n, 0.1, rng);
        }
    }

    /// Centres the outputs on typical generator latents: head biases become
    /// `codes` and the feature bias `feature`.
    pub fn calibrate(
        &self,
        store: &mut ParamStore,
        codes: &StyleCodes,
        feature: &Tensor,
    ) -> Result<()> {
        for j in 0..self.m {
            store.insert(
                format!("gie.head{j}.b"),
                Tensor::from_vec(codes.code(j).to_vec()),
            );
        }
        let want = store.get("gie.f_bias")?.shape().to_vec();
        if feature.shape() != want.as_slice() {
            return Err(shape_err("feature bias", feature.shape(), &want));
        }
        store.insert("gie.f_bias", feature.clone());
        Ok(())
    }

    /// `x (3, H, W)` to flat style codes `(m * d_s)` and the feature `f`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let want = [3, self.image_size, self.image_size];
        if ctx.g.shape(x) != want {
            return Err(shape_err("gie input", ctx.g.shape(x), &want));
        }
        let mut h = x;
        let mut pooled = Vec::with_capacity(self.stages.len());
        for (i, &(_, _, res)) in self.stages.iter().enumerate() {
            if i > 0 {
                h = ctx.g.pool_mean(h, 2)?;
            }
            let a = conv(ctx, &format!("gie.s{i}.c1"), h)?;
            let a = ctx.g.act(a, Activation::Silu);
            let a = conv(ctx, &format!("gie.s{i}.c2"), a)?;
            let skip = conv(ctx, &format!("gie.s{i}.skip"), h)?;
            h = ctx.g.add(a, skip)?;
            let p = ctx.g.pool_mean(h, res / POOLED)?;
            let len = ctx.g.shape(p).iter().product::<usize>();
            pooled.push(ctx.g.reshape(p, &[len])?);
        }
        let bias = ctx.p("gie.f_bias")?;
        let f = ctx.g.add(h, bias)?;
        let feats = ctx.g.concat(&pooled)?;
        let heads = (0..self.m)
            .map(|j| linear(ctx, &format!("gie.head{j}"), feats))
            .collect::<Result<Vec<_>>>()?;
        let s = ctx.g.concat(&heads)?;
        Ok((s, f))
    }

    pub fn forward_values(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut ctx = Ctx::frozen(store);
        let xv = ctx.constant(x.clone());
        let (s, f) = self.forward(&mut ctx, xv)?;
        Ok((ctx.value(s).clone(), ctx.value(f).clone()))
    }
}
