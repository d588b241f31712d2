//! Toy style generator: a mapping network `z -> w` and an eight-layer
//! synthesis network from a learned 4x4 constant to a 32x32 RGB image.
//!
//! Layer `j` consumes style code `s_j`: it (optionally) upsamples, convolves,
//! adds injected noise when given, applies SiLU, then modulates every channel
//! by `(1 + A_j s_j)` and shifts it by `B_j s_j`. The last layer modulates and
//! projects to RGB with a 1x1 convolution. `G_s` is layers `0..t`, `G_l` is
//! layers `t..m`; both run the same loop as the full path `G`.

use super::config::{CodecConfig, GEN_BASE, GEN_CHANNELS, GEN_LAYERS, GEN_UPSAMPLE};
use super::layers::{conv, init_conv, init_linear, linear, split_flat};
use super::StyleCodes;
use crate::error::{shape_err, Result};
use crate::numerics::{Activation, RngState, Tensor, Var};
use crate::params::{Ctx, ParamStore};

/// Layers that accept injected noise when sampling training data.
pub const NOISE_LAYERS: usize = 3;
const MAP_HIDDEN: usize = 32;
const MOD_GAIN: f64 = 0.4;

/// Per-layer single-channel noise maps `(1, H, W)`, scaled per channel by
/// the layer's `noise` strengths.
#[derive(Clone, Debug, Default)]
pub struct SynthNoise {
    pub maps: Vec<Option<Tensor>>,
}

impl SynthNoise {
    pub fn sample(scale: f64, rng: &mut RngState) -> Self {
        let maps = (0..NOISE_LAYERS)
            .map(|j| {
                let res = super::config::resolution_after(j);
                Some(rng.normal_tensor(&[1, res, res], scale))
            })
            .collect();
        SynthNoise { maps }
    }

    fn get(&self, j: usize) -> Option<&Tensor> {
        self.maps.get(j).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    m: usize,
    t: usize,
    d_s: usize,
}

impl Generator {
    pub fn new(config: &CodecConfig) -> Self {
        Generator {
            m: config.m,
            t: config.t,
            d_s: config.d_s,
        }
    }

    pub fn split(&self) -> usize {
        self.t
    }

    fn in_channels(j: usize) -> usize {
        if j == 0 {
            GEN_CHANNELS[0]
        } else {
            GEN_CHANNELS[j - 1]
        }
    }

    fn mod_channels(j: usize) -> usize {
        if j + 1 == GEN_LAYERS {
            GEN_CHANNELS[j - 1]
        } else {
            GEN_CHANNELS[j]
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut RngState) -> Result<()> {
        let d = self.d_s;
        init_linear(store, "gen.map0", MAP_HIDDEN, d, 2f64.sqrt(), rng);
        init_linear(store, "gen.map1", d, MAP_HIDDEN, 1.0, rng);
        store.insert(
            "gen.const",
            rng.normal_tensor(&[GEN_CHANNELS[0], GEN_BASE, GEN_BASE], 1.0),
        );
        for j in 0..GEN_LAYERS {
            let c = Self::mod_channels(j);
            if j + 1 < GEN_LAYERS {
                init_conv(
                    store,
                    &format!("gen.l{j}.conv"),
                    c,
                    Self::in_channels(j),
                    3,
                    2f64.sqrt(),
                    rng,
                );
            }
            init_linear(store, &format!("gen.l{j}.sa"), c, d, MOD_GAIN, rng);
            store.insert(format!("gen.l{j}.sa.b"), Tensor::full(&[c], 1.0));
            init_linear(store, &format!("gen.l{j}.sb"), c, d, MOD_GAIN, rng);
            if j < NOISE_LAYERS {
                let s: Vec<f64> = (0..c).map(|_| 0.5 + rng.uniform()).collect();
                store.insert(format!("gen.l{j}.noise"), Tensor::from_vec(s));
            }
        }
        init_conv(
            store,
            "gen.rgb",
            3,
            GEN_CHANNELS[GEN_LAYERS - 2],
            1,
            1.0,
            rng,
        );
        self.normalize(store, rng)
    }

    /// Rescales the split feature to unit standard deviation (compensated in
    /// the next convolution; skipped when `t` is the last hidden layer) and
    /// the output to zero mean and standard deviation 1/2, measured on a
    /// fixed batch of mapped codes.
    fn normalize(&self, store: &mut ParamStore, rng: &mut RngState) -> Result<()> {
        let batch: Vec<StyleCodes> = (0..32)
            .map(|_| {
                let z = rng.normal_tensor(&[self.d_s], 1.0);
                self.codes_from_z(store, &z)
            })
            .collect::<Result<_>>()?;
        let t = self.t;
        if t + 1 < GEN_LAYERS {
            let f_std = pooled_std(
                batch
                    .iter()
                    .map(|s| self.g_s_values(store, &s.split(t)?.s_s)),
            )?;
            let c = 1.0 / f_std.max(1e-6);
            for key in ["sa.w", "sa.b", "sb.w", "sb.b"] {
                let name = format!("gen.l{}.{key}", t - 1);
                let v = store.get(&name)?.scale(c);
                store.insert(name, v);
            }
            let next = format!("gen.l{t}.conv.w");
            let w = store.get(&next)?.scale(1.0 / c);
            store.insert(next, w);
        }
        let images: Vec<Tensor> = batch
            .iter()
            .map(|s| self.full_values(store, s))
            .collect::<Result<_>>()?;
        let n: usize = images.iter().map(Tensor::len).sum();
        let mean = images.iter().map(Tensor::sum).sum::<f64>() / n as f64;
        let var = images
            .iter()
            .flat_map(|x| x.data().iter())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let gain = 0.5 / var.sqrt().max(1e-6);
        let w = store.get("gen.rgb.w")?.scale(gain);
        let b = store.get("gen.rgb.b")?.map(|v| (v - mean) * gain);
        store.insert("gen.rgb.w", w);
        store.insert("gen.rgb.b", b);
        Ok(())
    }

    /// Mapping network `z (d_s) -> w (d_s)`.
    pub fn map(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let h = linear(ctx, "gen.map0", z)?;
        let h = ctx.g.act(h, Activation::Silu);
        linear(ctx, "gen.map1", h)
    }

    /// Style codes of a sample: the mapped `w` replicated to every layer.
    pub fn codes_from_z(&self, store: &ParamStore, z: &Tensor) -> Result<StyleCodes> {
        let mut ctx = Ctx::frozen(store);
        let zv = ctx.constant(z.clone());
        let w = self.map(&mut ctx, zv)?;
        StyleCodes::replicate(ctx.value(w), self.m)
    }

    fn layer(
        &self,
        ctx: &mut Ctx,
        j: usize,
        h: Option<Var>,
        s: Var,
        noise: &SynthNoise,
    ) -> Result<Var> {
        let mut h = match h {
            Some(h) => h,
            None => ctx.p("gen.const")?,
        };
        if j + 1 < GEN_LAYERS {
            if GEN_UPSAMPLE[j] {
                h = ctx.g.upsample2x(h)?;
            }
            h = conv(ctx, &format!("gen.l{j}.conv"), h)?;
            if let Some(map) = noise.get(j) {
                let strength = ctx.store().get(&format!("gen.l{j}.noise"))?;
                let shape = ctx.g.shape(h).to_vec();
                if map.shape() != [1, shape[1], shape[2]] {
                    return Err(shape_err("synthesis noise", map.shape(), &shape));
                }
                let data = strength
                    .data()
                    .iter()
                    .flat_map(|&a| map.data().iter().map(move |&n| a * n))
                    .collect();
                let term = ctx.constant(Tensor::new(shape, data)?);
                h = ctx.g.add(h, term)?;
            }
            h = ctx.g.act(h, Activation::Silu);
        }
        let scale = linear(ctx, &format!("gen.l{j}.sa"), s)?;
        let shift = linear(ctx, &format!("gen.l{j}.sb"), s)?;
        h = ctx.g.channel_affine(h, scale, shift)?;
        if j + 1 == GEN_LAYERS {
            h = conv(ctx, "gen.rgb", h)?;
        }
        Ok(h)
    }

    /// Runs layers `first..first + codes.len()` from `h` (the learned constant
    /// when `None`).
    pub fn run(
        &self,
        ctx: &mut Ctx,
        codes: &[Var],
        first: usize,
        h: Option<Var>,
        noise: &SynthNoise,
    ) -> Result<Var> {
        let mut h = h;
        for (i, &s) in codes.iter().enumerate() {
            h = Some(self.layer(ctx, first + i, h, s, noise)?);
        }
        h.ok_or_else(|| shape_err("generator", &[0], &[self.m]))
    }

    fn check_len(&self, ctx: &Ctx, v: Var, codes: usize) -> Result<()> {
        let got = ctx.g.shape(v);
        if got != [codes * self.d_s] {
            return Err(shape_err("style codes", got, &[codes * self.d_s]));
        }
        Ok(())
    }

    /// `G_s`: codes `s_s` (flat, `t * d_s`) to the middle-level feature.
    pub fn g_s(&self, ctx: &mut Ctx, s_s: Var, noise: &SynthNoise) -> Result<Var> {
        self.check_len(ctx, s_s, self.t)?;
        let codes = split_flat(ctx, s_s, self.t)?;
        self.run(ctx, &codes, 0, None, noise)
    }

    /// `G_l`: codes `s_l` (flat, `(m - t) * d_s`) and a feature to an image.
    pub fn g_l(&self, ctx: &mut Ctx, s_l: Var, f: Var) -> Result<Var> {
        self.check_len(ctx, s_l, self.m - self.t)?;
        let codes = split_flat(ctx, s_l, self.m - self.t)?;
        self.run(ctx, &codes, self.t, Some(f), &SynthNoise::default())
    }

    /// Full path `G(S)`.
    pub fn full(&self, ctx: &mut Ctx, s: Var) -> Result<Var> {
        self.check_len(ctx, s, self.m)?;
        let codes = split_flat(ctx, s, self.m)?;
        self.run(ctx, &codes, 0, None, &SynthNoise::default())
    }

    pub fn full_values(&self, store: &ParamStore, s: &StyleCodes) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let sv = ctx.constant(s.flat().clone());
        let x = self.full(&mut ctx, sv)?;
        Ok(ctx.value(x).clone())
    }

    pub fn g_s_values(&self, store: &ParamStore, s_s: &Tensor) -> Result<Tensor> {
        self.g_s_noisy_values(store, s_s, &SynthNoise::default())
    }

    pub fn g_s_noisy_values(
        &self,
        store: &ParamStore,
        s_s: &Tensor,
        noise: &SynthNoise,
    ) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let sv = ctx.constant(s_s.clone());
        let f = self.g_s(&mut ctx, sv, noise)?;
        Ok(ctx.value(f).clone())
    }

    pub fn g_l_values(&self, store: &ParamStore, s_l: &Tensor, f: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(store);
        let sv = ctx.constant(s_l.clone());
        let fv = ctx.constant(f.clone());
        let x = self.g_l(&mut ctx, sv, fv)?;
        Ok(ctx.value(x).clone())
    }
}

fn pooled_std(items: impl Iterator<Item = Result<Tensor>>) -> Result<f64> {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for t in items {
        let t = t?;
        n += t.len();
        s += t.sum();
        s2 += t.sum_sq();
    }
    let mean = s / n as f64;
    Ok((s2 / n as f64 - mean * mean).max(0.0).sqrt())
}
