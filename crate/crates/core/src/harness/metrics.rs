//! Rate and distortion measures. Names with a `toy-` prefix are computed
//! with the fixed random extractor rather than a pretrained network.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, HscError, Result};
use crate::numerics::Tensor;
use crate::params::Ctx;
use crate::training::losses::{mse, perceptual_distance, Extractor, PERCEPTUAL_SCALES};

pub const MSE: &str = "mse";
pub const PSNR: &str = "psnr";
pub const TOY_PERCEPTUAL: &str = "toy-perceptual";
pub const TOY_FRECHET: &str = "toy-frechet";

/// Peak-to-peak range of pixel values (images live in `[-1, 1]`).
pub const PIXEL_RANGE: f64 = 2.0;

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (PIXEL_RANGE * PIXEL_RANGE / mse).log10()
    }
}

/// Global average of the extractor features at every perceptual scale:
/// `16 * 3 = 48` values per image.
pub fn pooled_features(x: &Tensor, extractor: &Extractor) -> Result<Vec<f64>> {
    let store = Default::default();
    let mut ctx = Ctx::frozen(&store);
    let xv = ctx.constant(x.clone());
    let mut out = Vec::new();
    for &k in &PERCEPTUAL_SCALES {
        let v = if k == 1 { xv } else { ctx.g.pool_mean(xv, k)? };
        let feat = extractor.features(&mut ctx, v)?;
        let t = ctx.value(feat);
        let c = t.shape()[0];
        let hw = t.len() / c;
        out.extend(
            t.data()
                .chunks(hw)
                .map(|ch| ch.iter().sum::<f64>() / hw as f64),
        );
    }
    Ok(out)
}

fn mean_cov(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two point sets:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(HscError::Config("frechet distance of an empty set".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(shape_err(
            "frechet_distance",
            &[a.len(), d],
            &[b.len(), b[0].len()],
        ));
    }
    if a == b {
        return Ok(0.0);
    }
    let (m1, s1) = mean_cov(a);
    let (m2, s2) = mean_cov(b);
    let r1 = psd_sqrt(&s1);
    let mid = &r1 * &s2 * &r1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(mid)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let value = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Set-level distortions between originals and reconstructions: mean MSE,
/// the PSNR of that MSE, mean toy perceptual distance and the toy Fréchet
/// distance of the two sets.
pub fn distortion_suite(
    xs: &[Tensor],
    x_hats: &[Tensor],
    extractor: &Extractor,
) -> Result<BTreeMap<String, f64>> {
    if xs.len() != x_hats.len() || xs.is_empty() {
        return Err(shape_err("distortion_suite", &[xs.len()], &[x_hats.len()]));
    }
    let n = xs.len() as f64;
    let (mut m, mut p) = (0.0, 0.0);
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    for (x, y) in xs.iter().zip(x_hats) {
        m += mse(y, x)? / n;
        p += perceptual_distance(y, x, extractor)? / n;
        fa.push(pooled_features(x, extractor)?);
        fb.push(pooled_features(y, extractor)?);
    }
    Ok(BTreeMap::from([
        (MSE.to_string(), m),
        (PSNR.to_string(), psnr_from_mse(m)),
        (TOY_PERCEPTUAL.to_string(), p),
        (TOY_FRECHET.to_string(), frechet_distance(&fa, &fb)?),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn images(seed: u64, n: usize) -> Vec<Tensor> {
        let mut rng = RngState::new(seed);
        (0..n)
            .map(|_| rng.normal_tensor(&[3, 16, 16], 0.5))
            .collect()
    }

    #[test]
    fn identical_sets_have_zero_distortion() {
        let xs = images(1, 4);
        let m = distortion_suite(&xs, &xs, &Extractor::default()).unwrap();
        assert_eq!(m[MSE], 0.0);
        assert_eq!(m[PSNR], PSNR_IDENTICAL);
        assert_eq!(m[TOY_PERCEPTUAL], 0.0);
        assert_eq!(m[TOY_FRECHET], 0.0);
    }

    #[test]
    fn unit_offset_has_unit_mse() {
        let xs = images(2, 3);
        let ys: Vec<Tensor> = xs.iter().map(|x| x.map(|v| v + 1.0)).collect();
        let m = distortion_suite(&xs, &ys, &Extractor::default()).unwrap();
        assert!((m[MSE] - 1.0).abs() < 1e-12);
        assert!((m[PSNR] - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn frechet_of_shifted_clouds_is_the_mean_gap() {
        let mut rng = RngState::new(3);
        let shift: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let a: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let b: Vec<Vec<f64>> = a
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect())
            .collect();
        let gap: f64 = shift.iter().map(|s| s * s).sum();
        assert!((frechet_distance(&a, &b).unwrap() - gap).abs() < 1e-8);
    }

    #[test]
    fn frechet_of_scaled_one_dimensional_clouds() {
        // 1-d Gaussians: (m1 - m2)^2 + (s1 - s2)^2
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 10.0]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|r| vec![3.0 * r[0] + 1.0]).collect();
        let (ma, sa): (f64, f64) = (
            2.45,
            (a.iter().map(|r| (r[0] - 2.45f64).powi(2)).sum::<f64>() / 49.0).sqrt(),
        );
        let expect = (3.0 * ma + 1.0 - ma).powi(2) + (3.0 * sa - sa).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn pooled_features_have_48_entries() {
        let f = pooled_features(&images(4, 1)[0], &Extractor::default()).unwrap();
        assert_eq!(f.len(), 48);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        assert!(distortion_suite(&images(5, 2), &images(6, 3), &Extractor::default()).is_err());
        let a = vec![vec![1.0, 2.0]];
        let b = vec![vec![1.0]];
        assert!(frechet_distance(&a, &b).is_err());
    }
}
