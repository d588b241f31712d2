//! Synthetic training data drawn from the toy generator itself, so the true
//! codes and feature of every image are known.

use super::codec::Codec;
use super::generator::SynthNoise;
use super::StyleCodes;
use crate::error::Result;
use crate::numerics::{RngState, Tensor};

#[derive(Clone, Debug)]
pub struct ToySample {
    pub z: Tensor,
    /// Ground-truth codes (the mapped `w`, replicated).
    pub codes: StyleCodes,
    /// Ground-truth feature: `G_s` of the codes with injected noise.
    pub f: Tensor,
    /// `G_l(s_l, f)` plus pixel noise.
    pub x: Tensor,
}

pub fn sample(codec: &Codec, rng: &mut RngState) -> Result<ToySample> {
    let cfg = codec.config();
    let gen = codec.generator();
    let z = rng.normal_tensor(&[cfg.d_s], 1.0);
    let codes = gen.codes_from_z(codec.params(), &z)?;
    let split = codes.split(cfg.t)?;
    let noise = SynthNoise::sample(cfg.feature_noise, rng);
    let f = gen.g_s_noisy_values(codec.params(), &split.s_s, &noise)?;
    let clean = gen.g_l_values(codec.params(), &split.s_l, &f)?;
    let x = clean.add(&rng.normal_tensor(clean.shape(), cfg.obs_noise))?;
    Ok(ToySample { z, codes, f, x })
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn sample_dataset(codec: &Codec, n: usize, seed: u64) -> Result<Vec<ToySample>> {
    let base = RngState::derive(seed, 0x5A17);
    (0..n)
        .map(|i| sample(codec, &mut base.fork(i as u64)))
        .collect()
}
