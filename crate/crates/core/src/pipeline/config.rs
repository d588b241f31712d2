use serde::{Deserialize, Serialize};

use crate::error::{HscError, Result};

/// Architecture of the toy codec. Stored as TOML inside model files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Square image side; the synthesis network is built for 32.
    pub image_size: usize,
    /// Number of style codes.
    pub m: usize,
    /// Split factor: codes `1..=t` drive `G_s`.
    pub t: usize,
    /// Dimension of each style code (and of the mapping network's `z`, `w`).
    pub d_s: usize,
    /// Number of feature slices.
    pub k: usize,
    /// Channels of the transformed feature `y`.
    pub c_y: usize,
    /// Channels of the semantic prior tensor.
    pub c_p: usize,
    /// Hidden channels of each slice context network.
    pub sce_hidden: usize,
    /// Length of the reduced semantic latent.
    pub r: usize,
    pub scn_hidden: usize,
    /// When false the semantic prior is replaced by zeros.
    pub use_prior: bool,
    /// Strength of the per-pixel noise injected into the early synthesis
    /// layers when sampling training data.
    pub feature_noise: f64,
    /// Standard deviation of the additive pixel noise on sampled images.
    pub obs_noise: f64,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            image_size: 32,
            m: 8,
            t: 3,
            d_s: 8,
            k: 8,
            c_y: 32,
            c_p: 8,
            sce_hidden: 16,
            r: 16,
            scn_hidden: 32,
            use_prior: true,
            feature_noise: 0.5,
            obs_noise: 0.02,
            seed: 1,
        }
    }
}

/// Output channels of synthesis layers `0..7`, and whether each layer
/// upsamples its input first. Layer 7 maps to RGB.
pub(crate) const GEN_CHANNELS: [usize; 7] = [16, 16, 16, 8, 8, 8, 8];
pub(crate) const GEN_UPSAMPLE: [bool; 7] = [false, true, false, true, false, true, false];
pub(crate) const GEN_BASE: usize = 4;
pub(crate) const GEN_LAYERS: usize = 8;

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HscError::Config(msg));
        if self.image_size != 32 {
            return bad(format!("image_size must be 32, got {}", self.image_size));
        }
        if self.m != GEN_LAYERS {
            return bad(format!(
                "the synthesis network has {GEN_LAYERS} style inputs, m = {}",
                self.m
            ));
        }
        if self.t == 0 || self.t >= self.m {
            return bad(format!("split t = {} outside 1..{}", self.t, self.m));
        }
        if self.k == 0 || self.k > self.c_y {
            return bad(format!("k = {} slices for {} channels", self.k, self.c_y));
        }
        for (name, v) in [
            ("d_s", self.d_s),
            ("c_y", self.c_y),
            ("c_p", self.c_p),
            ("sce_hidden", self.sce_hidden),
            ("r", self.r),
            ("scn_hidden", self.scn_hidden),
        ] {
            if v == 0 || v > u16::MAX as usize {
                return bad(format!("{name} = {v}"));
            }
        }
        if !(self.feature_noise >= 0.0 && self.obs_noise >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        Ok(())
    }

    /// Shape `(C_f, H_f, W_f)` of the middle-level feature at split `t`.
    pub fn feature_shape(&self) -> [usize; 3] {
        feature_shape_at(self.t)
    }

    pub fn code_len(&self) -> usize {
        self.m * self.d_s
    }

    /// Channel ranges of the `k` slices: equal shares, remainder to the last.
    pub fn slice_bounds(&self) -> Vec<(usize, usize)> {
        slice_bounds(self.c_y, self.k)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: CodecConfig = toml::from_str(text).map_err(|e| HscError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn resolution_after(layer: usize) -> usize {
    GEN_BASE << GEN_UPSAMPLE[..=layer].iter().filter(|&&u| u).count()
}

pub(crate) fn feature_shape_at(t: usize) -> [usize; 3] {
    let res = resolution_after(t - 1);
    [GEN_CHANNELS[t - 1], res, res]
}

pub fn slice_bounds(c_y: usize, k: usize) -> Vec<(usize, usize)> {
    let share = c_y / k;
    (0..k)
        .map(|i| (i * share, if i + 1 == k { c_y } else { (i + 1) * share }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_gives_8x8_feature() {
        let c = CodecConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_shape(), [16, 8, 8]);
        assert_eq!(feature_shape_at(5), [8, 16, 16]);
    }

    #[test]
    fn slices_partition_channels() {
        assert_eq!(slice_bounds(32, 8)[3], (12, 16));
        assert!(slice_bounds(32, 8).iter().all(|(a, b)| b - a == 4));
        assert_eq!(slice_bounds(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
        assert_eq!(slice_bounds(32, 1), vec![(0, 32)]);
    }

    #[test]
    fn toml_round_trip() {
        let c = CodecConfig {
            k: 4,
            use_prior: false,
            ..Default::default()
        };
        assert_eq!(CodecConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(CodecConfig::from_toml("t = 9").is_err());
        assert!(CodecConfig::from_toml("bogus = 1").is_err());
    }
}
