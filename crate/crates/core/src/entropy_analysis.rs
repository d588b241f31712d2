//! Exhaustive discrete entropy bookkeeping for chains of deterministic maps.
//!
//! A chain `X = F_0 -> F_1 -> ... -> F_n` of deterministic maps satisfies
//! `H(X) = H(F_n) + sum_i H(F_{i-1} | F_i)`, and for any semantic map `S`
//! `H(X) = H(S) + H(X | S)`. Everything here is computed by enumerating the
//! finite joint distributions, so the identities can be checked to rounding
//! error rather than estimated.

use std::fmt::Write as _;

use crate::error::{HscError, Result};
use crate::numerics::RngState;

const NORMALIZATION_TOL: f64 = 1e-12;

/// Probability vector over symbols `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDistribution {
    probs: Vec<f64>,
}

impl FiniteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(HscError::InvalidDistribution("empty support".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(HscError::InvalidDistribution(format!("entry {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(HscError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(FiniteDistribution { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(HscError::InvalidDistribution("empty support".into()));
        }
        Ok(FiniteDistribution {
            probs: vec![1.0 / n as f64; n],
        })
    }

    /// Random distribution with strictly positive mass on every symbol.
    pub fn random(n: usize, rng: &mut RngState) -> Result<Self> {
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        // absorb rounding so the sum is 1 to within the tolerance
        let drift: f64 = 1.0 - probs.iter().sum::<f64>();
        probs[0] += drift;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support_len(&self) -> usize {
        self.probs.len()
    }
}

/// Total map from input symbols `0..table.len()` to output symbols `0..out_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicMap {
    table: Vec<usize>,
    out_size: usize,
}

impl DeterministicMap {
    pub fn new(table: Vec<usize>, out_size: usize) -> Result<Self> {
        if let Some(&bad) = table.iter().find(|&&s| s >= out_size) {
            return Err(HscError::InvalidDistribution(format!(
                "map image {bad} outside output alphabet of size {out_size}"
            )));
        }
        Ok(DeterministicMap { table, out_size })
    }

    pub fn identity(n: usize) -> Self {
        DeterministicMap {
            table: (0..n).collect(),
            out_size: n,
        }
    }

    pub fn constant(n: usize) -> Self {
        DeterministicMap {
            table: vec![0; n],
            out_size: 1,
        }
    }

    /// Random surjection from `n` symbols onto `m <= n` symbols.
    pub fn random_surjection(n: usize, m: usize, rng: &mut RngState) -> Result<Self> {
        if m == 0 || m > n {
            return Err(HscError::InvalidDistribution(format!(
                "no surjection from {n} onto {m} symbols"
            )));
        }
        // every output gets one preimage, the rest land anywhere; then shuffle
        let mut table: Vec<usize> = (0..m).chain((m..n).map(|_| rng.below(m))).collect();
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            table.swap(i, j);
        }
        Self::new(table, m)
    }

    pub fn input_len(&self) -> usize {
        self.table.len()
    }

    pub fn output_len(&self) -> usize {
        self.out_size
    }

    pub fn apply(&self, symbol: usize) -> usize {
        self.table[symbol]
    }
}

/// Joint distribution of a pair `(A, B)` stored row-major as `p[a][b]`.
#[derive(Clone, Debug)]
pub struct JointDistribution {
    probs: Vec<f64>,
    a_len: usize,
    b_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Given {
    A,
    B,
}

impl JointDistribution {
    pub fn new(a_len: usize, b_len: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != a_len * b_len {
            return Err(HscError::InvalidDistribution(format!(
                "{} entries for a {a_len}x{b_len} joint",
                probs.len()
            )));
        }
        FiniteDistribution::new(probs.clone())?;
        Ok(JointDistribution {
            probs,
            a_len,
            b_len,
        })
    }

    /// Joint of `(X, T(X))` for a deterministic map `T`.
    pub fn of_map(x: &FiniteDistribution, map: &DeterministicMap) -> Result<Self> {
        if map.input_len() != x.support_len() {
            return Err(HscError::ChainMismatch {
                stage: 1,
                reason: format!(
                    "map takes {} symbols, distribution has {}",
                    map.input_len(),
                    x.support_len()
                ),
            });
        }
        let mut probs = vec![0.0; x.support_len() * map.output_len()];
        for (a, &p) in x.probs().iter().enumerate() {
            probs[a * map.output_len() + map.apply(a)] = p;
        }
        Ok(JointDistribution {
            probs,
            a_len: x.support_len(),
            b_len: map.output_len(),
        })
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        self.probs
            .chunks(self.b_len)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.b_len];
        for row in self.probs.chunks(self.b_len) {
            for (acc, p) in m.iter_mut().zip(row) {
                *acc += p;
            }
        }
        m
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(&self.probs)
    }

    pub fn a_len(&self) -> usize {
        self.a_len
    }
}

fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum();
    h.max(0.0)
}

/// Shannon entropy in bits with the `0 log 0 = 0` convention.
pub fn entropy(d: &FiniteDistribution) -> f64 {
    entropy_of(d.probs())
}

/// `H(A | B)` or `H(B | A)` as joint entropy minus the conditioning marginal.
pub fn conditional_entropy(joint: &JointDistribution, given: Given) -> f64 {
    let marginal = match given {
        Given::A => joint.marginal_a(),
        Given::B => joint.marginal_b(),
    };
    (joint.entropy() - entropy_of(&marginal)).max(0.0)
}

pub fn pushforward(x: &FiniteDistribution, map: &DeterministicMap) -> Result<FiniteDistribution> {
    Ok(FiniteDistribution {
        probs: JointDistribution::of_map(x, map)?.marginal_b(),
    })
}

#[derive(Clone, Debug)]
pub struct ChainReport {
    /// `H(F_0) .. H(F_n)`.
    pub stage_entropies: Vec<f64>,
    /// `H(F_{i-1} | F_i)` for `i = 1..=n`.
    pub conditionals: Vec<f64>,
    pub residual: f64,
}

impl ChainReport {
    pub fn final_entropy(&self) -> f64 {
        *self.stage_entropies.last().expect("at least F_0")
    }

    pub fn conditional_sum(&self) -> f64 {
        self.conditionals.iter().sum()
    }
}

/// Walks the chain exhaustively and reports the recursion residual
/// `|H(X) - H(F_n) - sum H(F_{i-1} | F_i)|`.
pub fn verify_chain_recursion(
    x: &FiniteDistribution,
    maps: &[DeterministicMap],
) -> Result<ChainReport> {
    let mut current = x.clone();
    let mut stage_entropies = vec![entropy(x)];
    let mut conditionals = Vec::with_capacity(maps.len());
    for (i, map) in maps.iter().enumerate() {
        if map.input_len() != current.support_len() {
            return Err(HscError::ChainMismatch {
                stage: i + 1,
                reason: format!(
                    "map takes {} symbols but stage {} has {}",
                    map.input_len(),
                    i,
                    current.support_len()
                ),
            });
        }
        let joint = JointDistribution::of_map(&current, map)?;
        conditionals.push(conditional_entropy(&joint, Given::B));
        current = FiniteDistribution {
            probs: joint.marginal_b(),
        };
        stage_entropies.push(entropy(&current));
    }
    let h_x = stage_entropies[0];
    let h_n = *stage_entropies.last().expect("nonempty");
    let residual = (h_x - h_n - conditionals.iter().sum::<f64>()).abs();
    Ok(ChainReport {
        stage_entropies,
        conditionals,
        residual,
    })
}

#[derive(Clone, Debug)]
pub struct MixtureReport {
    pub alpha: f64,
    /// `alpha (H(S) + H(X|S)) + (1 - alpha) (H(F_n) + sum H(F_{i-1}|F_i))`.
    pub value: f64,
    pub residual: f64,
    /// `alpha H(S) + (1 - alpha) H(F_n)`, the bits that must actually be coded.
    pub coded_bits: f64,
}

#[derive(Clone, Debug)]
pub struct SemanticReport {
    pub h_x: f64,
    pub h_s: f64,
    pub h_x_given_s: f64,
    pub residual: f64,
    pub chain: Option<ChainReport>,
    pub mixture: Option<MixtureReport>,
}

/// Checks `H(X) = H(S) + H(X|S)` for a semantic map and, when a chain and a
/// mixing weight are given, the convex combination with the chain recursion.
pub fn verify_semantic_identity(
    x: &FiniteDistribution,
    semantic_map: &DeterministicMap,
    mixture: Option<(f64, &[DeterministicMap])>,
) -> Result<SemanticReport> {
    let joint = JointDistribution::of_map(x, semantic_map).map_err(|e| match e {
        HscError::ChainMismatch { reason, .. } => HscError::ChainMismatch { stage: 0, reason },
        other => other,
    })?;
    let h_x = entropy(x);
    let h_s = entropy_of(&joint.marginal_b());
    let h_x_given_s = conditional_entropy(&joint, Given::B);
    let residual = (h_x - h_s - h_x_given_s).abs();
    let (chain, mixture) = match mixture {
        None => (None, None),
        Some((alpha, maps)) => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(HscError::InvalidDistribution(format!(
                    "mixture weight {alpha} outside [0, 1]"
                )));
            }
            let chain = verify_chain_recursion(x, maps)?;
            let value = alpha * (h_s + h_x_given_s)
                + (1.0 - alpha) * (chain.final_entropy() + chain.conditional_sum());
            let coded_bits = alpha * h_s + (1.0 - alpha) * chain.final_entropy();
            let m = MixtureReport {
                alpha,
                value,
                residual: (value - h_x).abs(),
                coded_bits,
            };
            (Some(chain), Some(m))
        }
    };
    Ok(SemanticReport {
        h_x,
        h_s,
        h_x_given_s,
        residual,
        chain,
        mixture,
    })
}

/// Uniform 4-symbol source with the `{0,1} -> a, {2,3} -> b` merge.
pub fn merging_example() -> (FiniteDistribution, DeterministicMap) {
    (
        FiniteDistribution::uniform(4).expect("nonempty"),
        DeterministicMap::new(vec![0, 0, 1, 1], 2).expect("valid map"),
    )
}

/// Text tables for the built-in example chains.
pub fn demo_report() -> Result<String> {
    let mut out = String::new();
    let w = |out: &mut String, s: String| {
        out.push_str(&s);
        out.push('\n');
    };

    let (x, merge) = merging_example();
    let mut rng = RngState::new(42);
    let x8 = FiniteDistribution::random(8, &mut rng)?;
    let chain8 = vec![
        DeterministicMap::random_surjection(8, 6, &mut rng)?,
        DeterministicMap::random_surjection(6, 4, &mut rng)?,
        DeterministicMap::random_surjection(4, 2, &mut rng)?,
    ];
    let chains: Vec<(&str, &FiniteDistribution, Vec<DeterministicMap>)> = vec![
        (
            "bijection(4)",
            &x,
            vec![DeterministicMap::new(vec![2, 0, 3, 1], 4)?],
        ),
        ("merge 4->2", &x, vec![merge.clone()]),
        ("random 8->6->4->2 (seed 42)", &x8, chain8.clone()),
    ];

    w(
        &mut out,
        "chain recursion: H(X) = H(F_n) + sum H(F_{i-1}|F_i)".into(),
    );
    w(
        &mut out,
        format!(
            "{:<30} {:>8} {:>8} {:>12} {:>10}",
            "chain", "H(X)", "H(F_n)", "sum H(.|.)", "residual"
        ),
    );
    for (name, dist, maps) in &chains {
        let r = verify_chain_recursion(dist, maps)?;
        w(
            &mut out,
            format!(
                "{:<30} {:>8.4} {:>8.4} {:>12.4} {:>10.2e}",
                name,
                r.stage_entropies[0],
                r.final_entropy(),
                r.conditional_sum(),
                r.residual
            ),
        );
    }

    w(&mut out, String::new());
    w(&mut out, "semantic identity: H(X) = H(S) + H(X|S)".into());
    w(
        &mut out,
        format!(
            "{:<30} {:>8} {:>8} {:>8} {:>10}",
            "semantic map", "H(X)", "H(S)", "H(X|S)", "residual"
        ),
    );
    let maps: Vec<(&str, DeterministicMap)> = vec![
        ("identity", DeterministicMap::identity(4)),
        ("constant", DeterministicMap::constant(4)),
        ("merge 4->2", merge.clone()),
    ];
    for (name, map) in &maps {
        let r = verify_semantic_identity(&x, map, None)?;
        w(
            &mut out,
            format!(
                "{:<30} {:>8.4} {:>8.4} {:>8.4} {:>10.2e}",
                name, r.h_x, r.h_s, r.h_x_given_s, r.residual
            ),
        );
    }

    // semantic map onto 2 symbols vs a feature chain ending in 4 symbols:
    // the semantics is coarser, so mixing lowers the coded bits
    w(&mut out, String::new());
    w(
        &mut out,
        "mixture over alpha (X: 8 symbols, S: 2 symbols, chain 8->6->4)".into(),
    );
    w(
        &mut out,
        format!(
            "{:<8} {:>10} {:>10} {:>12}",
            "alpha", "mixture", "residual", "coded bits"
        ),
    );
    let semantic = DeterministicMap::random_surjection(8, 2, &mut rng)?;
    let feature_chain = &chain8[..2];
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let r = verify_semantic_identity(&x8, &semantic, Some((alpha, feature_chain)))?;
        let m = r.mixture.expect("mixture requested");
        w(
            &mut out,
            format!(
                "{:<8.2} {:>10.4} {:>10.2e} {:>12.4}",
                alpha, m.value, m.residual, m.coded_bits
            ),
        );
    }
    let _ = writeln!(out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force conditional entropy straight from the definition
    /// `-sum p(a,b) log2 p(a|b)`.
    fn conditional_oracle(joint: &JointDistribution) -> f64 {
        let mb = joint.marginal_b();
        let mut h = 0.0;
        for a in 0..joint.a_len {
            for (b, &m) in mb.iter().enumerate() {
                let p = joint.probs[a * joint.b_len + b];
                if p > 0.0 {
                    h -= p * (p / m).log2();
                }
            }
        }
        h
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&FiniteDistribution::uniform(4).unwrap()), 2.0);
        assert_eq!(
            entropy(&FiniteDistribution::new(vec![1.0, 0.0]).unwrap()),
            0.0
        );
        let h = entropy(&FiniteDistribution::new(vec![0.5, 0.25, 0.25]).unwrap());
        assert!((h - 1.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(FiniteDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(FiniteDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(FiniteDistribution::new(vec![]).is_err());
    }

    #[test]
    fn conditional_independent_and_functional() {
        // A uniform on 2, B uniform on 3, independent
        let joint = JointDistribution::new(2, 3, vec![1.0 / 6.0; 6]).unwrap();
        assert!((conditional_entropy(&joint, Given::B) - 1.0).abs() < 1e-12);
        // A = g(B)
        let b = FiniteDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let g = DeterministicMap::new(vec![1, 0, 1], 2).unwrap();
        let jb = JointDistribution::of_map(&b, &g).unwrap();
        assert!(conditional_entropy(&jb, Given::A).abs() < 1e-12);
    }

    #[test]
    fn merging_chain_oracle() {
        let (x, merge) = merging_example();
        let joint = JointDistribution::of_map(&x, &merge).unwrap();
        assert!((entropy_of(&joint.marginal_b()) - 1.0).abs() < 1e-12);
        assert!((conditional_oracle(&joint) - 1.0).abs() < 1e-12);
        let r = verify_chain_recursion(&x, &[merge]).unwrap();
        assert!(r.residual <= 1e-9);
        assert!((r.conditionals[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bijection_preserves_entropy() {
        let mut rng = RngState::new(9);
        let x = FiniteDistribution::random(6, &mut rng).unwrap();
        let perm = DeterministicMap::random_surjection(6, 6, &mut rng).unwrap();
        let r = verify_chain_recursion(&x, &[perm]).unwrap();
        assert_eq!(r.residual, 0.0);
        assert!((r.stage_entropies[1] - r.stage_entropies[0]).abs() < 1e-12);
    }

    #[test]
    fn three_stage_chain_seed_42() {
        let mut rng = RngState::new(42);
        let x = FiniteDistribution::random(8, &mut rng).unwrap();
        let maps = vec![
            DeterministicMap::random_surjection(8, 5, &mut rng).unwrap(),
            DeterministicMap::random_surjection(5, 3, &mut rng).unwrap(),
            DeterministicMap::random_surjection(3, 2, &mut rng).unwrap(),
        ];
        let r = verify_chain_recursion(&x, &maps).unwrap();
        assert!(r.residual <= 1e-9);
        // each conditional agrees with the brute-force definition
        let mut cur = x.clone();
        for (i, m) in maps.iter().enumerate() {
            let j = JointDistribution::of_map(&cur, m).unwrap();
            assert!((conditional_oracle(&j) - r.conditionals[i]).abs() < 1e-12);
            cur = pushforward(&cur, m).unwrap();
        }
    }

    #[test]
    fn non_composable_chain_names_stage() {
        let x = FiniteDistribution::uniform(4).unwrap();
        let maps = vec![
            DeterministicMap::new(vec![0, 0, 1, 1], 2).unwrap(),
            DeterministicMap::identity(3),
        ];
        match verify_chain_recursion(&x, &maps) {
            Err(HscError::ChainMismatch { stage, .. }) => assert_eq!(stage, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_identity_examples() {
        let (x, merge) = merging_example();
        let id = verify_semantic_identity(&x, &DeterministicMap::identity(4), None).unwrap();
        assert!(id.h_x_given_s.abs() < 1e-12);
        let c = verify_semantic_identity(&x, &DeterministicMap::constant(4), None).unwrap();
        assert_eq!(c.h_s, 0.0);
        assert!((c.h_x_given_s - c.h_x).abs() < 1e-12);
        let chain = vec![
            DeterministicMap::new(vec![0, 1, 2, 2], 3).unwrap(),
            DeterministicMap::new(vec![0, 0, 1], 2).unwrap(),
        ];
        let r = verify_semantic_identity(&x, &merge, Some((0.5, &chain))).unwrap();
        assert!(r.mixture.unwrap().residual <= 1e-9);
    }

    #[test]
    fn coarser_semantics_lowers_coded_bits() {
        // the strict inequalities hold on this constructed pair
        let x = FiniteDistribution::uniform(8).unwrap();
        let semantic = DeterministicMap::new(vec![0, 0, 0, 0, 1, 1, 1, 1], 2).unwrap();
        let chain = vec![DeterministicMap::new(vec![0, 0, 1, 1, 2, 2, 3, 3], 4).unwrap()];
        let r = verify_semantic_identity(&x, &semantic, Some((0.5, &chain))).unwrap();
        let c = r.chain.as_ref().unwrap();
        assert!(r.h_x_given_s > c.conditional_sum());
        assert!(r.h_s < c.final_entropy());
        assert!(r.mixture.unwrap().coded_bits < c.final_entropy());
    }

    #[test]
    fn demo_report_renders() {
        let s = demo_report().unwrap();
        assert!(s.contains("merge 4->2"));
        assert!(s.contains("mixture"));
    }
}
