//! The codec: toy generator, inversion encoder, the two compression networks
//! and the encode/decode paths over the container.

mod codec;
mod config;
pub mod data;
pub mod fcn;
pub mod generator;
pub mod gie;
mod layers;
pub mod scn;

pub use codec::{Codec, DecodedLatents, Encoded};
pub use config::{slice_bounds, CodecConfig};
pub use data::{sample_dataset, ToySample};
pub use fcn::{Fcn, SliceDecoder};
pub use generator::{Generator, SynthNoise};
pub use gie::Gie;
pub use scn::Scn;

use crate::error::{shape_err, HscError, Result};
use crate::numerics::Tensor;

/// The `m` style codes, stored flat as `m * d_s` values (code-major).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCodes {
    m: usize,
    d_s: usize,
    flat: Tensor,
}

impl StyleCodes {
    pub fn new(m: usize, d_s: usize, flat: Tensor) -> Result<Self> {
        if flat.shape() != [m * d_s] {
            return Err(shape_err("style codes", flat.shape(), &[m * d_s]));
        }
        if !flat.is_finite() {
            return Err(HscError::NonFinite("style codes"));
        }
        Ok(StyleCodes { m, d_s, flat })
    }

    /// `m` copies of one code vector.
    pub fn replicate(w: &Tensor, m: usize) -> Result<Self> {
        let d = w.len();
        let flat = Tensor::from_vec((0..m).flat_map(|_| w.data().iter().copied()).collect());
        Self::new(m, d, flat)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn flat(&self) -> &Tensor {
        &self.flat
    }

    pub fn code(&self, j: usize) -> &[f64] {
        &self.flat.data()[j * self.d_s..(j + 1) * self.d_s]
    }

    pub fn split(&self, t: usize) -> Result<SemanticSplit> {
        if t == 0 || t >= self.m {
            return Err(HscError::Config(format!(
                "split t = {t} outside 1..{}",
                self.m
            )));
        }
        Ok(SemanticSplit {
            t,
            d_s: self.d_s,
            s_s: self.flat.slice_channels(0, t * self.d_s)?,
            s_l: self.flat.slice_channels(t * self.d_s, self.m * self.d_s)?,
        })
    }
}

/// Codes `1..=t` (`s_s`) and `t+1..=m` (`s_l`), each flat.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSplit {
    pub t: usize,
    pub d_s: usize,
    pub s_s: Tensor,
    pub s_l: Tensor,
}

impl SemanticSplit {
    pub fn len_s(&self) -> usize {
        self.s_s.len() / self.d_s
    }

    pub fn len_l(&self) -> usize {
        self.s_l.len() / self.d_s
    }

    pub fn join(&self) -> Result<StyleCodes> {
        let flat = Tensor::concat_channels(&[&self.s_s, &self.s_l])?;
        StyleCodes::new(self.len_s() + self.len_l(), self.d_s, flat)
    }
}
