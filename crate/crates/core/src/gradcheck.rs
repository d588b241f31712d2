//! Central finite-difference verification of analytic parameter gradients.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numerics::{RngState, Tensor};
use crate::params::ParamStore;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub draws: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.draws += other.draws;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference scheme. Steps are relative to `max(|x|, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub step: f64,
    /// Five-point rule (`O(h^4)`) instead of the three-point one.
    pub five_point: bool,
}

impl Stencil {
    /// Three points, small step: for losses with kinks (leaky ReLU).
    pub const NARROW: Stencil = Stencil {
        step: 1e-5,
        five_point: false,
    };
    /// Five points, large step: for smooth losses of large magnitude (rates
    /// of 10^4 bits), where a small step loses too many digits to
    /// cancellation.
    pub const WIDE: Stencil = Stencil {
        step: 1e-3,
        five_point: true,
    };
}

/// Compares the gradients returned by `eval` against central differences at
/// `draws` randomly chosen coordinates of the parameters it reports, using
/// [`Stencil::NARROW`].
pub fn check_store<F>(
    store: &ParamStore,
    eval: F,
    draws: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    check_store_with(store, eval, draws, rng, Stencil::NARROW)
}

pub fn check_store_with<F>(
    store: &ParamStore,
    eval: F,
    draws: usize,
    rng: &mut RngState,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    let (_, grads) = eval(store)?;
    let coords: Vec<(&String, usize)> = grads
        .iter()
        .flat_map(|(name, g)| (0..g.len()).map(move |i| (name, i)))
        .collect();
    let mut report = GradCheckReport {
        draws: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    if coords.is_empty() {
        return Ok(report);
    }
    let mut probe = store.clone();
    for _ in 0..draws {
        let (name, i) = coords[rng.below(coords.len())];
        let orig = store.get(name)?.data()[i];
        let h = stencil.step * orig.abs().max(1.0);
        let mut at = |v: f64| -> Result<f64> {
            probe.get_mut(name).expect("present").data_mut()[i] = v;
            Ok(eval(&probe)?.0)
        };
        let near = at(orig + h)? - at(orig - h)?;
        let numeric = if stencil.five_point {
            let far = at(orig + 2.0 * h)? - at(orig - 2.0 * h)?;
            (8.0 * near - far) / (12.0 * h)
        } else {
            near / (2.0 * h)
        };
        probe.get_mut(name).expect("present").data_mut()[i] = orig;
        let err = relative_error(grads[name].data()[i], numeric);
        report.draws += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{name}[{i}]");
        }
    }
    Ok(report)
}
