//! Brute-force recomputations of the path statistics, written directly
//! from the definitions with hash maps and floating-point sums. Shared by
//! the integration tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::HashMap;
use std::hash::Hash;

use moe_lab::analysis::{AlignmentMap, RoutingTrace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random trace: `tokens` records over `n_layers` layers of `n_experts`
/// experts with `top_k` distinct picks each. Skewed so paths repeat.
pub fn random_trace(seed: u64, n_layers: usize, n_experts: usize, top_k: usize, tokens: usize) -> RoutingTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let choices: Vec<Vec<Vec<usize>>> = (0..tokens)
        .map(|_| {
            (0..n_layers)
                .map(|_| {
                    let mut picks = Vec::new();
                    while picks.len() < top_k {
                        // squaring a uniform favours low expert ids
                        let u: f64 = rng.random();
                        let e = ((u * u) * n_experts as f64) as usize;
                        if !picks.contains(&e) {
                            picks.push(e);
                        }
                    }
                    picks
                })
                .collect()
        })
        .collect();
    RoutingTrace::from_choices(n_experts, &choices).unwrap()
}

/// A random trace shape within the oracle bounds (N <= 4, L <= 3,
/// at most 100 tokens).
pub fn random_small_trace(seed: u64) -> RoutingTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(2..=4);
    let l = rng.random_range(2..=3);
    let k = rng.random_range(1..=n.min(2));
    let t = rng.random_range(1..=100);
    random_trace(seed, l, n, k, t)
}

fn entropy_of<K: Eq + Hash>(items: impl IntoIterator<Item = K>) -> f64 {
    let mut counts: HashMap<K, f64> = HashMap::new();
    let mut n = 0.0;
    for k in items {
        *counts.entry(k).or_default() += 1.0;
        n += 1.0;
    }
    -counts.values().map(|&c| (c / n) * (c / n).log2()).sum::<f64>()
}

fn top1s(trace: &RoutingTrace, l: usize) -> Vec<usize> {
    trace.records.iter().map(|r| r.topk[l * trace.top_k]).collect()
}

pub fn routing_entropy(trace: &RoutingTrace) -> f64 {
    entropy_of((0..trace.len()).map(|t| (0..trace.n_layers).map(|l| trace.records[t].topk[l * trace.top_k]).collect::<Vec<_>>()))
}

/// `H(X, Y) - H(X)` over adjacent top-1 choices.
fn conditional(trace: &RoutingTrace, l: usize) -> f64 {
    let (a, b) = (top1s(trace, l - 1), top1s(trace, l));
    entropy_of(a.iter().copied().zip(b.iter().copied())) - entropy_of(a)
}

pub fn markov_entropy(trace: &RoutingTrace) -> f64 {
    entropy_of(top1s(trace, 0)) + (1..trace.n_layers).map(|l| conditional(trace, l)).sum::<f64>()
}

/// `I(X; Y) = H(X) + H(Y) - H(X, Y)` for layers `l - 1` and `l`.
pub fn adjacent_mi(trace: &RoutingTrace, l: usize) -> f64 {
    let (a, b) = (top1s(trace, l - 1), top1s(trace, l));
    entropy_of(a.clone()) + entropy_of(b.clone()) - entropy_of(a.into_iter().zip(b))
}

pub fn cumulative_coverage(trace: &RoutingTrace, k: usize) -> f64 {
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for t in 0..trace.len() {
        *counts.entry(trace.path(t)).or_default() += 1;
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    c.iter().take(k).sum::<usize>() as f64 / trace.len() as f64
}

fn aligned_set(trace: &RoutingTrace, align: &AlignmentMap, t: usize, l: usize) -> Vec<usize> {
    let k = trace.top_k;
    trace.records[t].topk[l * k..(l + 1) * k].iter().map(|&e| align.perms[l][e]).collect()
}

/// Mean over every token and every length-`w` layer window of the mean
/// Jaccard similarity of consecutive aligned top-k sets.
pub fn path_consistency(trace: &RoutingTrace, align: &AlignmentMap, w: usize) -> f64 {
    let mut scores = Vec::new();
    for t in 0..trace.len() {
        for start in 0..=trace.n_layers - w {
            let mut acc = 0.0;
            for l in start + 1..start + w {
                let a = aligned_set(trace, align, t, l - 1);
                let b = aligned_set(trace, align, t, l);
                let inter = a.iter().filter(|e| b.contains(e)).count() as f64;
                let union = (a.len() + b.len()) as f64 - inter;
                acc += inter / union;
            }
            scores.push(acc / (w - 1) as f64);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Share of maximal runs (an aligned expert staying in the top-k set over
/// consecutive layers) that last at least `x` layers.
pub fn sustained_engagement(trace: &RoutingTrace, align: &AlignmentMap, x: usize) -> f64 {
    let (mut long, mut all) = (0usize, 0usize);
    for t in 0..trace.len() {
        for e in 0..trace.n_experts {
            let mut l = 0;
            while l < trace.n_layers {
                if aligned_set(trace, align, t, l).contains(&e) {
                    let start = l;
                    while l < trace.n_layers && aligned_set(trace, align, t, l).contains(&e) {
                        l += 1;
                    }
                    all += 1;
                    if l - start >= x {
                        long += 1;
                    }
                } else {
                    l += 1;
                }
            }
        }
    }
    long as f64 / all as f64
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
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

/// Best assignment score of a co-occurrence matrix by trying every
/// permutation, and how many permutations reach it.
pub fn exhaustive_best(cooc: &[Vec<usize>]) -> (usize, usize) {
    let scores: Vec<usize> = permutations(cooc.len()).iter().map(|s| s.iter().enumerate().map(|(j, &i)| cooc[i][j]).sum()).collect();
    let best = *scores.iter().max().unwrap();
    (best, scores.iter().filter(|&&s| s == best).count())
}
