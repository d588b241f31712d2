//! Entropy-model ablations: the same transforms with a different context
//! model (prior removed, fewer slices), refitted and compared by rate.

use crate::entropy_models::round_half_away;
use crate::error::Result;
use crate::numerics::{RngState, Tensor};
use crate::params::ParamStore;
use crate::pipeline::{Codec, CodecConfig, Fcn};
use crate::training::{fit_context, TrainSchedule, CONTEXT_PREFIXES};

/// `base` with a freshly initialized context model for `(use_prior, k)`.
/// Everything else, the feature transforms included, is kept.
pub fn context_variant(base: &Codec, use_prior: bool, k: usize, seed: u64) -> Result<Codec> {
    let config = CodecConfig {
        use_prior,
        k,
        ..base.config().clone()
    };
    config.validate()?;
    let mut store = ParamStore::new();
    for (name, t) in base.params().iter() {
        if !CONTEXT_PREFIXES.iter().any(|p| name.starts_with(p)) {
            store.insert(name.clone(), t.clone());
        }
    }
    Fcn::new(&config).init_context(&mut store, &mut RngState::derive(seed, 0xAB1A));
    Codec::from_params(config, store)
}

/// `(s_hat, y)` per image: decoded codes and the unquantized transformed
/// feature, the inputs of the feature entropy model.
pub fn context_inputs(codec: &Codec, images: &[Tensor]) -> Result<Vec<(Tensor, Tensor)>> {
    let scn = codec.scn();
    let fcn = codec.fcn();
    images
        .iter()
        .map(|x| {
            let (s, f) = codec.analyze(x)?;
            let s_hat = scn.code(codec.params(), s.flat())?.s_hat;
            Ok((s_hat, fcn.transform_values(codec.params(), &f)?))
        })
        .collect()
}

/// Mean estimated feature-stream bits of the rounded inputs.
pub fn mean_feature_bits(codec: &Codec, inputs: &[(Tensor, Tensor)]) -> Result<f64> {
    let fcn = codec.fcn();
    let mut total = 0.0;
    for (s_hat, y) in inputs {
        let bits = fcn.estimated_bits(codec.params(), &y.map(round_half_away), s_hat)?;
        total += bits.iter().sum::<f64>();
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Refits the context model of a variant and returns its mean held-out rate.
pub fn refit_and_measure(
    base: &Codec,
    use_prior: bool,
    k: usize,
    schedule: &TrainSchedule,
    train: &[(Tensor, Tensor)],
    held_out: &[(Tensor, Tensor)],
) -> Result<f64> {
    let variant = context_variant(base, use_prior, k, schedule.seed)?;
    let fitted = fit_context(&variant, schedule, train)?.codec;
    mean_feature_bits(&fitted, held_out)
}
