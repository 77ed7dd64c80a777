use serde::Serialize;

use crate::error::{Error, Result};

use super::info::pair_counts;
use super::trace::RoutingTrace;

/// Minimum-cost perfect assignment on a square matrix (Hungarian method with
/// potentials, O(n^3)). Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

/// Permutation `sigma` maximizing `sum_j cooc[sigma[j]][j]`: column `j`
/// (an expert of the upper layer) is relabeled as row `sigma[j]`.
pub fn best_permutation(cooc: &[Vec<usize>]) -> Vec<usize> {
    let n = cooc.len();
    // rows of the cost matrix are upper-layer experts
    let cost: Vec<Vec<i64>> = (0..n).map(|j| (0..n).map(|i| -(cooc[i][j] as i64)).collect()).collect();
    hungarian(&cost)
}

/// Per-layer relabelings into layer 0's label space.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentMap {
    /// `perms[l][e]` is the aligned label of expert `e` at layer `l`.
    pub perms: Vec<Vec<usize>>,
}

impl AlignmentMap {
    pub fn identity(n_layers: usize, n_experts: usize) -> Self {
        Self { perms: vec![(0..n_experts).collect(); n_layers] }
    }

    pub fn label(&self, l: usize, e: usize) -> usize {
        self.perms[l][e]
    }

    /// Aligned top-k set of record `t` at layer `l`.
    pub fn aligned_topk(&self, trace: &RoutingTrace, t: usize, l: usize) -> Vec<usize> {
        trace.topk(t, l).iter().map(|&e| self.perms[l][e]).collect()
    }
}

/// Aligns each layer's experts to the layer below by optimal assignment on
/// the top-1 co-occurrence counts, then composes the maps down the stack.
pub fn align_experts(trace: &RoutingTrace) -> Result<AlignmentMap> {
    if trace.n_layers == 0 {
        return Err(Error::invalid("alignment needs at least one layer"));
    }
    let mut map = AlignmentMap::identity(trace.n_layers, trace.n_experts);
    for l in 1..trace.n_layers {
        let sigma = best_permutation(&pair_counts(trace, l));
        map.perms[l] = sigma.iter().map(|&below| map.perms[l - 1][below]).collect();
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..n {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn score(cooc: &[Vec<usize>], sigma: &[usize]) -> usize {
        sigma.iter().enumerate().map(|(j, &i)| cooc[i][j]).sum()
    }

    #[test]
    fn diagonal_and_swap() {
        assert_eq!(best_permutation(&[vec![10, 0], vec![0, 10]]), [0, 1]);
        assert_eq!(best_permutation(&[vec![0, 10], vec![10, 0]]), [1, 0]);
    }

    #[test]
    fn composes_down_the_stack() {
        // layer 1 is layer 0 shifted by one, layer 2 is layer 1 shifted again
        let choices: Vec<Vec<Vec<usize>>> = (0..12).map(|t| (0..3).map(|l| vec![(t + l) % 3]).collect()).collect();
        let tr = RoutingTrace::from_choices(3, &choices).unwrap();
        let a = align_experts(&tr).unwrap();
        for t in 0..tr.len() {
            let base = tr.top1(t, 0);
            assert!((1..3).all(|l| a.label(l, tr.top1(t, l)) == base));
        }
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(n in 1usize..=6, seed in any::<u64>()) {
            let mut s = seed;
            let cooc: Vec<Vec<usize>> = (0..n).map(|_| (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) % 20) as usize
            }).collect()).collect();
            let sigma = best_permutation(&cooc);
            let mut sorted = sigma.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            let best = permutations(n).iter().map(|p| score(&cooc, p)).max().unwrap();
            prop_assert_eq!(score(&cooc, &sigma), best);
        }
    }
}
