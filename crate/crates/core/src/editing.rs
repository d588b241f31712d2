//! Semantic editing and style mixing on decoded latents.
//!
//! Edits never touch the bitstream: a stream is decoded to `(Ŝ, f̂)`, a
//! direction is added to the codes, the feature follows through the change
//! of `G_s`, and `G_l` synthesizes the result.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{shape_err, HscError, Result};
use crate::harness::container::HscBitstream;
use crate::numerics::{RngState, Tensor};
use crate::params::{hash_hex, ParamStore};
use crate::pipeline::{Codec, Generator, SemanticSplit, StyleCodes};

/// A shift `magnitude * delta` in style-code space.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub delta: Tensor,
    pub magnitude: f64,
}

impl EditDirection {
    pub fn new(delta: Tensor, magnitude: f64) -> Result<Self> {
        if delta.shape().len() != 1 {
            return Err(shape_err("edit direction", delta.shape(), &[delta.len()]));
        }
        if !delta.is_finite() || !magnitude.is_finite() {
            return Err(HscError::NonFinite("edit direction"));
        }
        Ok(EditDirection { delta, magnitude })
    }

    pub fn zero(d_s: usize) -> Self {
        EditDirection {
            delta: Tensor::zeros(&[d_s]),
            magnitude: 0.0,
        }
    }

    pub fn with_magnitude(&self, magnitude: f64) -> Self {
        EditDirection {
            delta: self.delta.clone(),
            magnitude,
        }
    }

    /// The vector actually added to a code.
    pub fn shift(&self) -> Tensor {
        self.delta.scale(self.magnitude)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOptions {
    /// Per-code switch (length `m`); `None` edits every code.
    pub layer_mask: Option<Vec<bool>>,
    /// Factor on the shift applied to `s_l`.
    pub attenuation: f64,
}

impl Default for EditOptions {
    fn default() -> Self {
        EditOptions {
            layer_mask: None,
            attenuation: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditedLatents {
    pub s_s: Tensor,
    pub s_l: Tensor,
    /// Edited feature; `None` for semantics-only streams.
    pub f: Option<Tensor>,
}

// Adding an exact zero is skipped so a null edit keeps every bit, signed
// zeros included.
fn add_exact(a: f64, d: f64) -> f64 {
    if d == 0.0 {
        a
    } else {
        a + d
    }
}

/// Adds the direction to every (unmasked) code of both partitions.
pub fn apply_direction(
    split: &SemanticSplit,
    dir: &EditDirection,
    opts: &EditOptions,
) -> Result<SemanticSplit> {
    let d_s = split.d_s;
    if dir.delta.len() != d_s {
        return Err(shape_err("apply_direction", dir.delta.shape(), &[d_s]));
    }
    let m = split.len_s() + split.len_l();
    if let Some(mask) = &opts.layer_mask {
        if mask.len() != m {
            return Err(shape_err("edit layer mask", &[mask.len()], &[m]));
        }
    }
    if !opts.attenuation.is_finite() {
        return Err(HscError::NonFinite("edit attenuation"));
    }
    let shift = dir.shift();
    let shifted = |codes: &Tensor, first: usize, factor: f64| {
        let mut out = codes.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = first + i / d_s;
            if opts.layer_mask.as_ref().is_some_and(|mask| !mask[j]) {
                continue;
            }
            let d = if factor == 1.0 {
                shift.data()[i % d_s]
            } else {
                factor * shift.data()[i % d_s]
            };
            *v = add_exact(*v, d);
        }
        out
    };
    Ok(SemanticSplit {
        t: split.t,
        d_s,
        s_s: shifted(&split.s_s, 0, 1.0),
        s_l: shifted(&split.s_l, split.t, opts.attenuation),
    })
}

/// `Δf = G_s(s̃_s) − G_s(ŝ_s)`.
pub fn feature_delta(
    gen: &Generator,
    store: &ParamStore,
    s_s_hat: &Tensor,
    s_s_tilde: &Tensor,
) -> Result<Tensor> {
    let a = gen.g_s_values(store, s_s_tilde)?;
    let b = gen.g_s_values(store, s_s_hat)?;
    a.sub(&b)
}

/// `f̂ + Δf`, evaluated so the algebra closes exactly: wherever `f̂` equals
/// `G_s(ŝ_s)` the result is `G_s(s̃_s)` itself, and zero changes leave `f̂`
/// untouched.
pub fn edit_feature(f_hat: &Tensor, g_hat: &Tensor, g_tilde: &Tensor) -> Result<Tensor> {
    if f_hat.shape() != g_hat.shape() || g_hat.shape() != g_tilde.shape() {
        return Err(shape_err("edit_feature", f_hat.shape(), g_tilde.shape()));
    }
    let data = f_hat
        .data()
        .iter()
        .zip(g_hat.data())
        .zip(g_tilde.data())
        .map(
            |((&f, &a), &b)| {
                if f == a {
                    b
                } else {
                    add_exact(f, b - a)
                }
            },
        )
        .collect();
    Tensor::new(f_hat.shape().to_vec(), data)
}

/// Edits decoded latents. A missing feature means the semantics-only path.
pub fn edit_latents(
    codec: &Codec,
    s_hat: &StyleCodes,
    f_hat: Option<&Tensor>,
    dir: &EditDirection,
    opts: &EditOptions,
) -> Result<EditedLatents> {
    let split = s_hat.split(codec.config().t)?;
    let edited = apply_direction(&split, dir, opts)?;
    let f = match f_hat {
        None => None,
        Some(f_hat) if edited.s_s == split.s_s => Some(f_hat.clone()),
        Some(f_hat) => {
            let gen = codec.generator();
            let g_hat = gen.g_s_values(codec.params(), &split.s_s)?;
            let g_tilde = gen.g_s_values(codec.params(), &edited.s_s)?;
            Some(edit_feature(f_hat, &g_hat, &g_tilde)?)
        }
    };
    Ok(EditedLatents {
        s_s: edited.s_s,
        s_l: edited.s_l,
        f,
    })
}

/// `G_l(s̃_l, f̃)`, or `G(S̃)` without a feature.
pub fn synthesize_edit(codec: &Codec, edited: &EditedLatents) -> Result<Tensor> {
    let gen = codec.generator();
    match &edited.f {
        Some(f) => gen.g_l_values(codec.params(), &edited.s_l, f),
        None => {
            let split = SemanticSplit {
                t: codec.config().t,
                d_s: codec.config().d_s,
                s_s: edited.s_s.clone(),
                s_l: edited.s_l.clone(),
            };
            gen.full_values(codec.params(), &split.join()?)
        }
    }
}

/// Decodes a stream and synthesizes the edited image.
pub fn edit_image(
    codec: &Codec,
    stream: &HscBitstream,
    dir: &EditDirection,
    opts: &EditOptions,
) -> Result<Tensor> {
    let lat = codec.decode_latents(stream)?;
    let edited = edit_latents(codec, &lat.s_hat, lat.f_hat.as_ref(), dir, opts)?;
    synthesize_edit(codec, &edited)
}

/// `G_l(ŝ_l` of the style stream, `f̂` of the content stream`)`.
pub fn style_mix(codec: &Codec, style: &HscBitstream, content: &HscBitstream) -> Result<Tensor> {
    if style.header.model_hash != content.header.model_hash {
        return Err(HscError::HashMismatch {
            stream: hash_hex(&content.header.model_hash),
            model: hash_hex(&style.header.model_hash),
        });
    }
    let style = codec.decode_latents(style)?;
    let content = codec.decode_latents(content)?;
    let f = match content.f_hat {
        Some(f) => f,
        // a semantics-only content stream still defines a feature through G_s
        None => {
            let s_s = content.s_hat.split(codec.config().t)?.s_s;
            codec.generator().g_s_values(codec.params(), &s_s)?
        }
    };
    codec.generator().g_l_values(
        codec.params(),
        &style.s_hat.split(codec.config().t)?.s_l,
        &f,
    )
}

/// Principal directions of the mapped code distribution, largest variance
/// first. Each direction has the length of one standard deviation along it
/// and its largest component positive.
pub fn pca_directions(
    codec: &Codec,
    samples: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<EditDirection>> {
    let d = codec.config().d_s;
    if samples < 2 || count == 0 || count > d {
        return Err(HscError::Config(format!(
            "pca over {samples} samples for {count} of {d} directions"
        )));
    }
    let gen = codec.generator();
    let mut rng = RngState::derive(seed, 0xED17);
    let mut w = DMatrix::<f64>::zeros(samples, d);
    for i in 0..samples {
        let z = rng.normal_tensor(&[d], 1.0);
        let codes = gen.codes_from_z(codec.params(), &z)?;
        for (j, &v) in codes.code(0).iter().enumerate() {
            w[(i, j)] = v;
        }
    }
    let mean = w.row_mean();
    for mut row in w.row_iter_mut() {
        row -= &mean;
    }
    let cov = w.transpose() * &w / (samples - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(count)
        .map(|i| {
            let v = eig.eigenvectors.column(i);
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            let std = eig.eigenvalues[i].max(0.0).sqrt();
            EditDirection::new(
                Tensor::from_vec(v.iter().map(|x| sign * std * x).collect()),
                1.0,
            )
        })
        .collect()
}

const DIRECTION_FILE_TAG: &str = "kind = \"edit-directions\"\n";

fn direction_name(i: usize) -> String {
    format!("direction.{i:03}")
}

/// Saves unit-magnitude directions in the model parameter format.
pub fn save_directions(path: &Path, dirs: &[EditDirection]) -> Result<()> {
    let mut store = ParamStore::new();
    for (i, dir) in dirs.iter().enumerate() {
        store.insert(direction_name(i), dir.shift());
    }
    store.save(path, DIRECTION_FILE_TAG)?;
    Ok(())
}

pub fn load_directions(path: &Path) -> Result<Vec<EditDirection>> {
    let (store, tag, _) = ParamStore::load(path)?;
    if tag != DIRECTION_FILE_TAG {
        return Err(HscError::ModelFormat(format!(
            "{} is not a direction file",
            path.display()
        )));
    }
    (0..store.len())
        .map(|i| EditDirection::new(store.get(&direction_name(i))?.clone(), 1.0))
        .collect()
}
