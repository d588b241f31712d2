use hsc::entropy_analysis::*;
use hsc::numerics::{std_normal_cdf, RngState};
use proptest::prelude::*;

/// A source over at most 64 symbols and a chain of maps down from it, all
/// drawn from `seed`.
fn chain(seed: u64) -> (FiniteDistribution, Vec<DeterministicMap>) {
    let mut rng = RngState::new(seed);
    let n = 1 + rng.below(64);
    let x = FiniteDistribution::random(n, &mut rng).unwrap();
    let mut maps = Vec::new();
    let mut size = n;
    for _ in 0..1 + rng.below(5) {
        let m = 1 + rng.below(size);
        maps.push(DeterministicMap::random_surjection(size, m, &mut rng).unwrap());
        size = m;
    }
    (x, maps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn chain_recursion_holds(seed in any::<u64>()) {
        let (x, maps) = chain(seed);
        let report = verify_chain_recursion(&x, &maps).unwrap();
        prop_assert!(report.residual <= 1e-9);
        // data processing: no map adds information
        prop_assert!(report.stage_entropies.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn mixture_identity_holds(seed in any::<u64>(), a in 0usize..5) {
        let alpha = a as f64 * 0.25;
        let (x, maps) = chain(seed);
        let semantic = maps[0].clone();
        let report = verify_semantic_identity(&x, &semantic, Some((alpha, &maps))).unwrap();
        prop_assert!(report.residual <= 1e-9);
        prop_assert!(report.mixture.unwrap().residual <= 1e-9);
    }

    #[test]
    fn normal_cdf_is_symmetric(z in -40.0f64..40.0) {
        prop_assert!((std_normal_cdf(z) + std_normal_cdf(-z) - 1.0).abs() <= 1e-12);
    }
}
