//! Training objectives. Image and feature distortions are means over
//! elements; the rate-distortion terms use summed squared errors next to
//! rates in bits.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, HscError, Result};
use crate::numerics::{Activation, RngState, Tensor, Var};
use crate::params::Ctx;
use crate::pipeline::Generator;

/// Downsampling factors of the multi-scale perceptual loss.
pub const PERCEPTUAL_SCALES: [usize; 3] = [1, 2, 4];
pub const EXTRACTOR_CHANNELS: usize = 16;
pub const EXTRACTOR_SEED: u64 = 0xFEA7;
const EXTRACTOR_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Perceptual term of the inversion loss.
    pub lambda1: f64,
    /// Feature-consistency term of the inversion loss.
    pub lambda2: f64,
    /// Semantic distortion multiplier.
    pub lambda3: f64,
    /// Feature distortion multiplier.
    pub lambda4: f64,
    /// Inversion loss weight in the joint objective.
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.8,
            lambda2: 0.1,
            lambda3: 64.0,
            lambda4: 16.0,
            lambda5: 10000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HscError::Config(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed random convolutional feature map standing in for a pretrained
/// network: a bias-free 3x3 convolution to 16 channels and a leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    weight: Tensor,
}

impl Default for Extractor {
    fn default() -> Self {
        Self::seeded(EXTRACTOR_SEED)
    }
}

impl Extractor {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = RngState::derive(seed, 0xE7);
        let std = (2.0 / 27.0f64).sqrt();
        Extractor {
            weight: rng.normal_tensor(&[EXTRACTOR_CHANNELS, 3, 3, 3], std),
        }
    }

    pub fn with_weight(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 4
            || weight.shape()[1] != 3
            || weight.shape()[2] != 3
            || weight.shape()[3] != 3
        {
            return Err(shape_err(
                "extractor weight",
                weight.shape(),
                &[EXTRACTOR_CHANNELS, 3, 3, 3],
            ));
        }
        Ok(Extractor { weight })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn features(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.constant(self.weight.clone());
        let h = ctx.g.conv2d(x, w, None, 1, 1)?;
        Ok(ctx.g.act(h, Activation::LeakyRelu(EXTRACTOR_SLOPE)))
    }
}

fn same_shape(ctx: &Ctx, a: Var, b: Var, op: &'static str) -> Result<()> {
    if ctx.g.shape(a) != ctx.g.shape(b) {
        return Err(shape_err(op, ctx.g.shape(a), ctx.g.shape(b)));
    }
    Ok(())
}

pub fn loss_mse(ctx: &mut Ctx, x_hat: Var, x: Var) -> Result<Var> {
    same_shape(ctx, x_hat, x, "loss_mse")?;
    let d = ctx.g.sub(x_hat, x)?;
    Ok(ctx.g.mean_sq(d))
}

/// Per-scale terms of the perceptual loss: the RMS feature difference at
/// full, half and quarter resolution.
pub fn mlpips_scales(ctx: &mut Ctx, x_hat: Var, x: Var, extractor: &Extractor) -> Result<Vec<Var>> {
    same_shape(ctx, x_hat, x, "loss_mlpips")?;
    let shape = ctx.g.shape(x).to_vec();
    let coarsest = PERCEPTUAL_SCALES[PERCEPTUAL_SCALES.len() - 1];
    if shape.len() != 3
        || shape[0] != 3
        || shape[1] < coarsest
        || shape[2] < coarsest
        || !shape[1].is_multiple_of(coarsest)
        || !shape[2].is_multiple_of(coarsest)
    {
        return Err(HscError::Image(format!(
            "perceptual loss needs a 3-channel image with sides divisible by {coarsest}, got {shape:?}"
        )));
    }
    PERCEPTUAL_SCALES
        .iter()
        .map(|&k| {
            let (a, b) = if k == 1 {
                (x_hat, x)
            } else {
                (ctx.g.pool_mean(x_hat, k)?, ctx.g.pool_mean(x, k)?)
            };
            let fa = extractor.features(ctx, a)?;
            let fb = extractor.features(ctx, b)?;
            let d = ctx.g.sub(fa, fb)?;
            let ms = ctx.g.mean_sq(d);
            Ok(ctx.g.sqrt(ms))
        })
        .collect()
}

pub fn loss_mlpips(ctx: &mut Ctx, x_hat: Var, x: Var, extractor: &Extractor) -> Result<Var> {
    let scales = mlpips_scales(ctx, x_hat, x, extractor)?;
    let terms: Vec<(f64, Var)> = scales.into_iter().map(|v| (1.0, v)).collect();
    ctx.g.weighted_sum(&terms)
}

/// Mean squared distance between the inverted feature and the generator's
/// feature for the inverted coarse codes.
pub fn loss_fsc(ctx: &mut Ctx, f: Var, s_s: Var, gen: &Generator) -> Result<Var> {
    let f_gen = gen.g_s(ctx, s_s, &Default::default())?;
    same_shape(ctx, f, f_gen, "loss_fsc")?;
    let d = ctx.g.sub(f, f_gen)?;
    Ok(ctx.g.mean_sq(d))
}

/// Individual terms of the inversion loss.
#[derive(Clone, Copy, Debug)]
pub struct GieTerms {
    pub mse: Var,
    pub mlpips: Var,
    pub fsc: Var,
    pub total: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn loss_gie(
    ctx: &mut Ctx,
    weights: &LossWeights,
    x_hat: Var,
    x: Var,
    f: Var,
    s_s: Var,
    gen: &Generator,
    extractor: &Extractor,
) -> Result<GieTerms> {
    let mse = loss_mse(ctx, x_hat, x)?;
    let mlpips = loss_mlpips(ctx, x_hat, x, extractor)?;
    let fsc = loss_fsc(ctx, f, s_s, gen)?;
    let total = ctx.g.weighted_sum(&[
        (1.0, mse),
        (weights.lambda1, mlpips),
        (weights.lambda2, fsc),
    ])?;
    Ok(GieTerms {
        mse,
        mlpips,
        fsc,
        total,
    })
}

/// `rate + lambda * ||a - b||^2`; returns `(distortion, total)`.
fn rate_distortion(
    ctx: &mut Ctx,
    rate: Var,
    a: Var,
    b: Var,
    lambda: f64,
    op: &'static str,
) -> Result<(Var, Var)> {
    same_shape(ctx, a, b, op)?;
    let d = ctx.g.sub(a, b)?;
    let dist = ctx.g.sum_sq(d);
    let total = ctx.g.weighted_sum(&[(1.0, rate), (lambda, dist)])?;
    Ok((dist, total))
}

/// Semantic rate-distortion loss; returns `(distortion, total)`.
pub fn loss_scn(ctx: &mut Ctx, s: Var, s_hat: Var, rate: Var, lambda3: f64) -> Result<(Var, Var)> {
    rate_distortion(ctx, rate, s_hat, s, lambda3, "loss_scn")
}

/// Feature rate-distortion loss; returns `(distortion, total)`.
pub fn loss_fcn(ctx: &mut Ctx, f: Var, f_hat: Var, rate: Var, lambda4: f64) -> Result<(Var, Var)> {
    rate_distortion(ctx, rate, f_hat, f, lambda4, "loss_fcn")
}

fn value_of(build: impl FnOnce(&mut Ctx) -> Result<Var>) -> Result<f64> {
    let store = Default::default();
    let mut ctx = Ctx::frozen(&store);
    let v = build(&mut ctx)?;
    Ok(ctx.value(v).item())
}

/// Mean squared error between two tensors of equal shape.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("mse", a.shape(), b.shape()));
    }
    Ok(a.sub(b)?.sum_sq() / a.len() as f64)
}

/// Value of the multi-scale perceptual loss.
pub fn perceptual_distance(x_hat: &Tensor, x: &Tensor, extractor: &Extractor) -> Result<f64> {
    value_of(|ctx| {
        let a = ctx.constant(x_hat.clone());
        let b = ctx.constant(x.clone());
        loss_mlpips(ctx, a, b, extractor)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_store, DEFAULT_TOLERANCE};
    use crate::params::ParamStore;
    use crate::pipeline::{Codec, CodecConfig};

    fn img(seed: u64) -> Tensor {
        RngState::new(seed).normal_tensor(&[3, 32, 32], 0.5)
    }

    #[test]
    fn mse_examples() {
        let x = img(1);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert!((mse(&x.map(|v| v + 1.0), &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(mse(&x, &Tensor::zeros(&[3, 32, 31])).is_err());
    }

    #[test]
    fn mse_matches_direct_oracle() {
        let (a, b) = (img(5), img(6));
        let oracle = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / a.len() as f64;
        let v = value_of(|ctx| {
            let (va, vb) = (ctx.constant(a.clone()), ctx.constant(b.clone()));
            loss_mse(ctx, va, vb)
        })
        .unwrap();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn mlpips_identity_and_additivity() {
        let ext = Extractor::default();
        let (a, b) = (img(1), img(2));
        assert_eq!(perceptual_distance(&a, &a, &ext).unwrap(), 0.0);
        let store = ParamStore::new();
        let mut ctx = Ctx::frozen(&store);
        let (va, vb) = (ctx.constant(a.clone()), ctx.constant(b.clone()));
        let scales = mlpips_scales(&mut ctx, va, vb, &ext).unwrap();
        let sum: f64 = scales.iter().map(|&s| ctx.value(s).item()).sum();
        assert!((sum - perceptual_distance(&a, &b, &ext).unwrap()).abs() < 1e-12);
        assert!(scales.iter().all(|&s| ctx.value(s).item() > 0.0));
    }

    #[test]
    fn mlpips_is_linear_in_extractor_weights() {
        let ext = Extractor::default();
        let double = Extractor::with_weight(ext.weight().scale(2.0)).unwrap();
        let (a, b) = (img(3), img(4));
        let one = perceptual_distance(&a, &b, &ext).unwrap();
        let two = perceptual_distance(&a, &b, &double).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12 * one.max(1.0));
    }

    #[test]
    fn mlpips_rejects_small_images() {
        let ext = Extractor::default();
        let x = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(
            perceptual_distance(&x, &x, &ext),
            Err(HscError::Image(_))
        ));
        let x = Tensor::zeros(&[3, 6, 6]);
        assert!(perceptual_distance(&x, &x, &ext).is_err());
    }

    #[test]
    fn fsc_zero_and_gradient_formula() {
        let codec = Codec::init(CodecConfig::default()).unwrap();
        let gen = codec.generator();
        let s_s = RngState::new(9).normal_tensor(&[24], 1.0);
        let f_gen = gen.g_s_values(codec.params(), &s_s).unwrap();
        let mut ctx = Ctx::frozen(codec.params());
        let sv = ctx.constant(s_s.clone());
        let fv = ctx.g.input(f_gen.clone());
        let l = loss_fsc(&mut ctx, fv, sv, &gen).unwrap();
        assert_eq!(ctx.value(l).item(), 0.0);

        let f = f_gen
            .add(&RngState::new(10).normal_tensor(f_gen.shape(), 0.3))
            .unwrap();
        let mut ctx = Ctx::frozen(codec.params());
        let sv = ctx.constant(s_s);
        let fv = ctx.g.input(f.clone());
        let l = loss_fsc(&mut ctx, fv, sv, &gen).unwrap();
        let grads = ctx.g.backward(l).unwrap();
        let expect = f.sub(&f_gen).unwrap().scale(2.0 / f.len() as f64);
        assert!(grads.get(fv).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn rd_losses_reduce_to_rate_at_zero_lambda() {
        let store = ParamStore::new();
        let mut ctx = Ctx::frozen(&store);
        let s = ctx.constant(img(1));
        let s_hat = ctx.constant(img(2));
        let rate = ctx.constant(Tensor::scalar(123.5));
        let (d, total) = loss_scn(&mut ctx, s, s_hat, rate, 0.0).unwrap();
        assert_eq!(ctx.value(total).item(), 123.5);
        assert!(ctx.value(d).item() > 0.0);
        let (_, total) = loss_fcn(&mut ctx, s, s_hat, rate, 2.0).unwrap();
        let expect = 123.5 + 2.0 * img(1).sub(&img(2)).unwrap().sum_sq();
        assert!((ctx.value(total).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda3: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            lambda5: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gie_loss_without_extra_terms_is_mse() {
        let codec = Codec::init(CodecConfig::default()).unwrap();
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let (a, b) = (img(1), img(2));
        let mut ctx = Ctx::frozen(codec.params());
        let (va, vb) = (ctx.constant(a.clone()), ctx.constant(b.clone()));
        let f = ctx.constant(Tensor::zeros(&[16, 8, 8]));
        let s_s = ctx.constant(Tensor::zeros(&[24]));
        let terms = loss_gie(
            &mut ctx,
            &w,
            va,
            vb,
            f,
            s_s,
            &codec.generator(),
            &Extractor::default(),
        )
        .unwrap();
        assert_eq!(ctx.value(terms.total).item(), mse(&a, &b).unwrap());
    }

    #[test]
    fn extractor_gradient_check() {
        // the perceptual loss through a trainable convolution in front of it
        let mut store = ParamStore::new();
        let mut rng = RngState::new(4);
        store.insert("pre.w", rng.normal_tensor(&[3, 3, 3, 3], 0.3));
        let (a, b) = (img(7), img(8));
        let ext = Extractor::default();
        let eval = |st: &ParamStore| {
            let mut ctx = Ctx::new(st, &["pre."]);
            let w = ctx.p("pre.w")?;
            let xa = ctx.constant(a.clone());
            let xa = ctx.g.conv2d(xa, w, None, 1, 1)?;
            let xb = ctx.constant(b.clone());
            let l = loss_mlpips(&mut ctx, xa, xb, &ext)?;
            ctx.gradients(l)
        };
        let report = check_store(&store, eval, 50, &mut RngState::new(5)).unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
    }
}
