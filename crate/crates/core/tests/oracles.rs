mod common;

use moe_lab::analysis::{self, align_experts, best_permutation, pair_counts, AlignmentMap, PathHistogram};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn statistics_match_brute_force(seed in any::<u64>()) {
        let tr = common::random_small_trace(seed);
        let hist = PathHistogram::from_trace(&tr);
        prop_assert!(close(hist.routing_entropy().unwrap().bits, common::routing_entropy(&tr)));
        prop_assert!(close(analysis::markov_entropy(&tr).unwrap(), common::markov_entropy(&tr)));
        for l in 1..tr.n_layers {
            prop_assert!(close(analysis::adjacent_mi(&tr, l).unwrap(), common::adjacent_mi(&tr, l).max(0.0)));
        }
        for k in 1..=hist.unique() + 1 {
            prop_assert!(close(hist.cumulative_coverage(k).unwrap(), common::cumulative_coverage(&tr, k)));
        }
        for align in [align_experts(&tr).unwrap(), AlignmentMap::identity(tr.n_layers, tr.n_experts)] {
            for w in 2..=tr.n_layers {
                prop_assert!(close(analysis::path_consistency(&tr, &align, w).unwrap(), common::path_consistency(&tr, &align, w)));
            }
            for x in 1..=tr.n_layers {
                prop_assert!(close(analysis::sustained_engagement(&tr, &align, x).unwrap(), common::sustained_engagement(&tr, &align, x)));
            }
        }
    }

    #[test]
    fn information_inequalities(seed in any::<u64>()) {
        let tr = common::random_small_trace(seed);
        let h = PathHistogram::from_trace(&tr).routing_entropy().unwrap().bits;
        let m = analysis::markov_entropy(&tr).unwrap();
        let cap = tr.n_layers as f64 * (tr.n_experts as f64).log2();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= m + 1e-12, "{h} > {m}");
        prop_assert!(m <= cap + 1e-12);
        for l in 1..tr.n_layers {
            prop_assert!(analysis::adjacent_mi(&tr, l).unwrap() >= 0.0);
        }
    }

    #[test]
    fn alignment_is_optimal_per_layer(seed in any::<u64>(), n in 2usize..=6) {
        let tr = common::random_trace(seed, 3, n, 1, 60);
        let align = align_experts(&tr).unwrap();
        for l in 1..tr.n_layers {
            let cooc = pair_counts(&tr, l);
            let sigma = best_permutation(&cooc);
            let score: usize = sigma.iter().enumerate().map(|(j, &i)| cooc[i][j]).sum();
            let (best, ties) = common::exhaustive_best(&cooc);
            prop_assert_eq!(score, best);
            // composed map is a permutation that sends each upper expert
            // to the aligned label of its matched lower expert
            let mut seen = align.perms[l].clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for j in 0..n {
                prop_assert_eq!(align.perms[l][j], align.perms[l - 1][sigma[j]]);
            }
            if ties == 1 {
                let unique = common::permutations(n).into_iter()
                    .find(|s| s.iter().enumerate().map(|(j, &i)| cooc[i][j]).sum::<usize>() == best).unwrap();
                prop_assert_eq!(sigma, unique);
            }
        }
    }
}

#[test]
fn deterministic_paths_have_zero_conditional_entropy() {
    // layer 2 is a function of layer 1: the chain bound is tight
    let choices: Vec<Vec<Vec<usize>>> = (0..40).map(|t| vec![vec![t % 4], vec![(t % 4 + 1) % 4]]).collect();
    let tr = moe_lab::analysis::RoutingTrace::from_choices(4, &choices).unwrap();
    let h = PathHistogram::from_trace(&tr).routing_entropy().unwrap().bits;
    assert_eq!(h, 2.0);
    assert_eq!(analysis::markov_entropy(&tr).unwrap(), 2.0);
    assert_eq!(analysis::adjacent_mi(&tr, 1).unwrap(), 2.0);
}
