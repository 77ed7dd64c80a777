use crate::error::{Error, Result};
use crate::tensor::Real;

/// One token's routing at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<T> {
    /// Full expert distribution.
    pub probs: Vec<T>,
    /// Selected experts, highest probability first.
    pub topk_indices: Vec<usize>,
    /// `probs[topk_indices[j]]`, not renormalized.
    pub gates: Vec<T>,
    pub layer: usize,
}

impl<T: Real> RoutingDecision<T> {
    pub fn top1(&self) -> usize {
        self.topk_indices[0]
    }

    pub fn with_layer(&self, layer: usize) -> Self {
        Self { layer, ..self.clone() }
    }
}

/// Picks the `k` largest probabilities; equal values go to the lower index.
pub fn top_k_select<T: Real>(probs: &[T], k: usize, layer: usize) -> Result<RoutingDecision<T>> {
    if k == 0 || k > probs.len() {
        return Err(Error::invalid(format!("top-k needs 1 <= k <= {}, got k={k}", probs.len())));
    }
    let mut idx = vec![0; k];
    top_k_into(probs, &mut idx);
    let gates = idx.iter().map(|&i| probs[i]).collect();
    Ok(RoutingDecision { probs: probs.to_vec(), topk_indices: idx, gates, layer })
}

/// Writes the `out.len()` best indices of `probs` into `out`, best first,
/// breaking ties toward the lower index.
pub(crate) fn top_k_into<T: Real>(probs: &[T], out: &mut [usize]) {
    let k = out.len();
    for slot in 0..k {
        let mut best = usize::MAX;
        for (i, &p) in probs.iter().enumerate() {
            if out[..slot].contains(&i) {
                continue;
            }
            if best == usize::MAX || p > probs[best] {
                best = i;
            }
        }
        out[slot] = best;
    }
}

/// Like [`top_k_into`] but the first pick must come from `allowed`; the
/// remaining picks are unconstrained.
pub(crate) fn top_k_constrained<T: Real>(probs: &[T], allowed: &[bool], out: &mut [usize]) -> Result<()> {
    let mut first = usize::MAX;
    for (i, &p) in probs.iter().enumerate() {
        if allowed[i] && (first == usize::MAX || p > probs[first]) {
            first = i;
        }
    }
    if first == usize::MAX {
        return Err(Error::invalid("path constraint leaves no allowed expert"));
    }
    out[0] = first;
    for slot in 1..out.len() {
        let mut best = usize::MAX;
        for (i, &p) in probs.iter().enumerate() {
            if out[..slot].contains(&i) {
                continue;
            }
            if best == usize::MAX || p > probs[best] {
                best = i;
            }
        }
        out[slot] = best;
    }
    Ok(())
}

/// Expands one decision per block into one per layer by reusing each block's
/// decision at all of its layers. `block_decisions[b]` is the decision made
/// at the first layer of block `b`.
pub fn mono_reuse<T: Real>(block_decisions: &[RoutingDecision<T>], n_layers: usize, block_size: usize) -> Vec<RoutingDecision<T>> {
    (0..n_layers).map(|l| block_decisions[l / block_size].with_layer(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_two_largest() {
        let d = top_k_select(&[0.4f64, 0.3, 0.2, 0.1], 2, 0).unwrap();
        assert_eq!(d.topk_indices, vec![0, 1]);
        assert_eq!(d.gates, vec![0.4, 0.3]);
    }

    #[test]
    fn uniform_ties_go_low() {
        let d = top_k_select(&[0.25f64; 4], 2, 0).unwrap();
        assert_eq!(d.topk_indices, vec![0, 1]);
    }

    #[test]
    fn k_equals_n_selects_everything() {
        let p = [0.1f64, 0.5, 0.15, 0.25];
        let d = top_k_select(&p, 4, 0).unwrap();
        let mut sorted = d.topk_indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!((d.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_k_above_n() {
        assert!(top_k_select(&[0.5f64, 0.5], 3, 0).is_err());
        assert!(top_k_select(&[0.5f64, 0.5], 0, 0).is_err());
    }

    #[test]
    fn constrained_first_pick() {
        let p = [0.5f64, 0.3, 0.2];
        let mut out = [0; 2];
        top_k_constrained(&p, &[false, false, true], &mut out).unwrap();
        assert_eq!(out, [2, 0]);
        assert!(top_k_constrained(&p, &[false; 3], &mut out).is_err());
    }

    #[test]
    fn mono_reuse_gives_one_decision_per_block() {
        let blocks: Vec<_> = (0..3).map(|b| top_k_select(&[0.1f64, 0.2, 0.3, 0.4], 1 + b % 2, b * 8).unwrap()).collect();
        let layers = mono_reuse(&blocks, 24, 8);
        assert_eq!(layers.len(), 24);
        let mut distinct: Vec<Vec<usize>> = layers.iter().map(|d| d.topk_indices.clone()).collect();
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
        assert!(layers.iter().enumerate().all(|(l, d)| d.layer == l));
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn permuting_experts_permutes_selection(
                probs in proptest::collection::vec(0.0f64..1.0, 6),
                perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
                k in 1usize..=6,
            ) {
                // distinct values so ties cannot break equivariance
                let mut p = probs.clone();
                for (i, v) in p.iter_mut().enumerate() { *v += i as f64 * 1e-9; }
                let base = top_k_select(&p, k, 0).unwrap();
                let mut permuted = vec![0.0; 6];
                for (i, &v) in p.iter().enumerate() { permuted[perm[i]] = v; }
                let moved = top_k_select(&permuted, k, 0).unwrap();
                let mapped: Vec<usize> = base.topk_indices.iter().map(|&i| perm[i]).collect();
                prop_assert_eq!(moved.topk_indices, mapped);
            }
        }
    }
}
