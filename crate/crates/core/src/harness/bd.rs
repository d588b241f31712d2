//! Rate-distortion curves and the Bjøntegaard-style average metric gap.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{HscError, Result};

pub const BD_MIN_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl RDPoint {
    pub fn metric(&self, name: &str) -> Result<f64> {
        self.metrics.get(name).copied().ok_or_else(|| {
            HscError::Curve(format!("point at {} bpp has no metric {name}", self.bpp))
        })
    }
}

/// Points ordered by strictly increasing bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts by bpp; rejects repeated rates and non-finite values.
    pub fn new(mut points: Vec<RDPoint>) -> Result<Self> {
        for p in &points {
            if !(p.bpp.is_finite() && p.bpp >= 0.0) {
                return Err(HscError::Curve(format!("invalid rate {}", p.bpp)));
            }
            if let Some((k, v)) = p.metrics.iter().find(|(_, v)| v.is_nan()) {
                return Err(HscError::Curve(format!(
                    "metric {k} = {v} at {} bpp",
                    p.bpp
                )));
            }
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(HscError::Curve("repeated rate".into()));
        }
        Ok(RDCurve { points })
    }

    /// Curve of one metric from `(bpp, value)` pairs.
    pub fn from_pairs(metric: &str, pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(bpp, v)| RDPoint {
                    bpp,
                    metrics: BTreeMap::from([(metric.to_string(), v)]),
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `log10` rate range covered by the curve.
    pub fn log_rate_range(&self) -> Result<(f64, f64)> {
        let (first, last) = match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => (a.bpp, b.bpp),
            _ => return Err(HscError::Curve("empty curve".into())),
        };
        if first <= 0.0 {
            return Err(HscError::Curve("log rate of a zero-rate point".into()));
        }
        Ok((first.log10(), last.log10()))
    }
}

/// Least-squares cubic `c0 + c1 r + c2 r^2 + c3 r^3` of `metric` against
/// `r = log10(bpp)`.
pub fn fit_cubic(curve: &RDCurve, metric: &str) -> Result<[f64; 4]> {
    let n = curve.len();
    if n < BD_MIN_POINTS {
        return Err(HscError::Curve(format!(
            "{n} points, need at least {BD_MIN_POINTS}"
        )));
    }
    curve.log_rate_range()?;
    let r: Vec<f64> = curve.points().iter().map(|p| p.bpp.log10()).collect();
    let a = DMatrix::from_fn(n, 4, |i, j| r[i].powi(j as i32));
    let y = DVector::from_iterator(
        n,
        curve
            .points()
            .iter()
            .map(|p| p.metric(metric))
            .collect::<Result<Vec<_>>>()?,
    );
    let svd = a.svd(true, true);
    let c = svd
        .solve(&y, 1e-14)
        .map_err(|e| HscError::Curve(format!("cubic fit failed: {e}")))?;
    Ok([c[0], c[1], c[2], c[3]])
}

fn antiderivative(c: &[f64; 4], r: f64) -> f64 {
    c[0] * r + c[1] * r * r / 2.0 + c[2] * r.powi(3) / 3.0 + c[3] * r.powi(4) / 4.0
}

/// Shared `log10` rate interval of two curves.
pub fn overlap(a: &RDCurve, b: &RDCurve) -> Result<(f64, f64)> {
    let (a0, a1) = a.log_rate_range()?;
    let (b0, b1) = b.log_rate_range()?;
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if lo >= hi {
        return Err(HscError::Curve(format!(
            "rate ranges [{a0:.4}, {a1:.4}] and [{b0:.4}, {b1:.4}] (log10 bpp) do not overlap"
        )));
    }
    Ok((lo, hi))
}

/// Average of `fit_b - fit_a` over the shared log-rate interval. Negative
/// means `b` is better for a lower-is-better metric.
pub fn bd_metric(a: &RDCurve, b: &RDCurve, metric: &str) -> Result<f64> {
    let ca = fit_cubic(a, metric)?;
    let cb = fit_cubic(b, metric)?;
    let (lo, hi) = overlap(a, b)?;
    let diff = [cb[0] - ca[0], cb[1] - ca[1], cb[2] - ca[2], cb[3] - ca[3]];
    Ok((antiderivative(&diff, hi) - antiderivative(&diff, lo)) / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(pairs: &[(f64, f64)]) -> RDCurve {
        RDCurve::from_pairs("d", pairs).unwrap()
    }

    fn base() -> RDCurve {
        curve(&[
            (0.1, 0.9),
            (0.25, 0.6),
            (0.5, 0.45),
            (1.0, 0.3),
            (2.0, 0.22),
        ])
    }

    #[test]
    fn identical_curves_have_zero_gap() {
        assert_eq!(bd_metric(&base(), &base(), "d").unwrap(), 0.0);
    }

    #[test]
    fn uniform_shift_is_returned() {
        let shifted: Vec<(f64, f64)> = base()
            .points()
            .iter()
            .map(|p| (p.bpp, p.metrics["d"] + 0.1))
            .collect();
        let gap = bd_metric(&base(), &curve(&shifted), "d").unwrap();
        assert!((gap - 0.1).abs() < 1e-12, "{gap}");
    }

    #[test]
    fn too_few_points_and_disjoint_ranges_fail() {
        let short = curve(&[(0.1, 1.0), (0.2, 0.9), (0.3, 0.8)]);
        assert!(bd_metric(&short, &base(), "d").is_err());
        let far = curve(&[(10.0, 0.1), (20.0, 0.09), (30.0, 0.08), (40.0, 0.07)]);
        assert!(matches!(
            bd_metric(&base(), &far, "d"),
            Err(HscError::Curve(_))
        ));
    }

    #[test]
    fn curve_rejects_repeated_rates() {
        assert!(RDCurve::from_pairs("d", &[(0.1, 1.0), (0.1, 0.5)]).is_err());
        assert!(RDCurve::from_pairs("d", &[(f64::NAN, 1.0)]).is_err());
    }

    #[test]
    fn exact_cubic_is_recovered() {
        let c = [0.3, -0.2, 0.05, 0.01];
        let pairs: Vec<(f64, f64)> = [0.1, 0.3, 0.7, 1.5, 3.0]
            .iter()
            .map(|&b: &f64| {
                let r = b.log10();
                (b, c[0] + c[1] * r + c[2] * r * r + c[3] * r.powi(3))
            })
            .collect();
        let fit = fit_cubic(&curve(&pairs), "d").unwrap();
        for (f, e) in fit.iter().zip(&c) {
            assert!((f - e).abs() < 1e-9);
        }
    }
}
