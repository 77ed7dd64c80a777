use crate::error::{Error, Result};

use super::align::AlignmentMap;
use super::info::entropy_bits;
use super::trace::RoutingTrace;

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of `(token, layer >= 1)` pairs whose aligned top-1 equals the
/// aligned top-1 one layer below.
pub fn adjacent_agreement(trace: &RoutingTrace, align: &AlignmentMap) -> Result<f64> {
    if trace.n_layers < 2 || trace.is_empty() {
        return Err(Error::invalid("agreement needs at least two layers and one token"));
    }
    let mut hits = 0usize;
    for t in 0..trace.len() {
        for l in 1..trace.n_layers {
            hits += (align.label(l, trace.top1(t, l)) == align.label(l - 1, trace.top1(t, l - 1))) as usize;
        }
    }
    Ok(hits as f64 / (trace.len() * (trace.n_layers - 1)) as f64)
}

/// Mean over tokens and over every window of `w` consecutive layers of the
/// window's mean Jaccard similarity between aligned top-k sets of adjacent
/// layers.
pub fn path_consistency(trace: &RoutingTrace, align: &AlignmentMap, w: usize) -> Result<f64> {
    let n_layers = trace.n_layers;
    if w < 2 || w > n_layers {
        return Err(Error::invalid(format!("window {w} outside 2..={n_layers}")));
    }
    if trace.is_empty() {
        return Err(Error::Data("empty trace".into()));
    }
    let mut total = 0.0;
    let mut windows = 0usize;
    for t in 0..trace.len() {
        let sets: Vec<Vec<usize>> = (0..n_layers).map(|l| align.aligned_topk(trace, t, l)).collect();
        let pair: Vec<f64> = (1..n_layers).map(|l| jaccard(&sets[l - 1], &sets[l])).collect();
        for s in 0..=n_layers - w {
            total += pair[s..s + w - 1].iter().sum::<f64>() / (w - 1) as f64;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Lengths of maximal runs of `true`.
pub fn run_lengths(membership: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cur = 0;
    for &m in membership {
        if m {
            cur += 1;
        } else if cur > 0 {
            out.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        out.push(cur);
    }
    out
}

/// Fraction of maximal runs, pooled over tokens and aligned experts, in
/// which an expert stays in the token's top-k set for at least `x` layers.
pub fn sustained_engagement(trace: &RoutingTrace, align: &AlignmentMap, x: usize) -> Result<f64> {
    if x == 0 {
        return Err(Error::invalid("engagement threshold must be at least 1"));
    }
    let (mut long, mut all) = (0usize, 0usize);
    for t in 0..trace.len() {
        let sets: Vec<Vec<usize>> = (0..trace.n_layers).map(|l| align.aligned_topk(trace, t, l)).collect();
        for e in 0..trace.n_experts {
            let membership: Vec<bool> = sets.iter().map(|s| s.contains(&e)).collect();
            for r in run_lengths(&membership) {
                all += 1;
                long += (r >= x) as usize;
            }
        }
    }
    if all == 0 {
        return Err(Error::Data("no expert runs in trace".into()));
    }
    Ok(long as f64 / all as f64)
}

/// Entry `l` is the token-averaged entropy (bits) of aligned top-1 usage
/// over layers `0..=l`.
pub fn token_entropy_profile(trace: &RoutingTrace, align: &AlignmentMap) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::Data("empty trace".into()));
    }
    let mut sums = vec![0.0; trace.n_layers];
    for t in 0..trace.len() {
        let mut counts = vec![0usize; trace.n_experts];
        for (l, s) in sums.iter_mut().enumerate() {
            counts[align.label(l, trace.top1(t, l))] += 1;
            *s += entropy_bits(counts.iter().copied());
        }
    }
    Ok(sums.into_iter().map(|s| s / trace.len() as f64).collect())
}
