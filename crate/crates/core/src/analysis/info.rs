use crate::error::{Error, Result};

use super::trace::RoutingTrace;

/// Plug-in entropy in bits of a distribution given by counts. Counts are
/// summed in ascending order so equal multisets give equal results.
pub fn entropy_bits(counts: impl IntoIterator<Item = usize>) -> f64 {
    let mut c: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    c.sort_unstable();
    let n: usize = c.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    c.iter().map(|&c| c as f64 / n * (n / c as f64).log2()).sum()
}

/// `joint[a][b]` co-occurrence counts of top-1 picks at layers `l - 1` and `l`.
pub fn pair_counts(trace: &RoutingTrace, l: usize) -> Vec<Vec<usize>> {
    let n = trace.n_experts;
    let mut joint = vec![vec![0usize; n]; n];
    for t in 0..trace.len() {
        joint[trace.top1(t, l - 1)][trace.top1(t, l)] += 1;
    }
    joint
}

fn layer_counts(trace: &RoutingTrace, l: usize) -> Vec<usize> {
    let mut c = vec![0; trace.n_experts];
    for t in 0..trace.len() {
        c[trace.top1(t, l)] += 1;
    }
    c
}

fn check_pair(trace: &RoutingTrace, l: usize) -> Result<()> {
    if l == 0 || l >= trace.n_layers {
        return Err(Error::invalid(format!("layer pair ({}, {l}) outside a {}-layer trace", l as isize - 1, trace.n_layers)));
    }
    if trace.is_empty() {
        return Err(Error::Data("empty trace".into()));
    }
    Ok(())
}

/// `H(E_l | E_{l-1})` in bits from the empirical pairwise joint.
pub fn conditional_entropy(trace: &RoutingTrace, l: usize) -> Result<f64> {
    check_pair(trace, l)?;
    let joint = pair_counts(trace, l);
    let n = trace.len() as f64;
    let mut terms = Vec::new();
    for row in &joint {
        let ca: usize = row.iter().sum();
        for &cab in row.iter().filter(|&&c| c > 0) {
            terms.push(cab as f64 / n * (ca as f64 / cab as f64).log2());
        }
    }
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}

/// First-order chain approximation `H(E_1) + sum_l H(E_l | E_{l-1})` in
/// bits; an upper bound on the entropy of the empirical path distribution.
pub fn markov_entropy(trace: &RoutingTrace) -> Result<f64> {
    if trace.is_empty() || trace.n_layers == 0 {
        return Err(Error::Data("markov entropy of an empty trace".into()));
    }
    let mut h = entropy_bits(layer_counts(trace, 0));
    for l in 1..trace.n_layers {
        h += conditional_entropy(trace, l)?;
    }
    Ok(h)
}

/// `I(E_{l-1}; E_l)` in bits for zero-based `l` in `1..L`.
pub fn adjacent_mi(trace: &RoutingTrace, l: usize) -> Result<f64> {
    check_pair(trace, l)?;
    Ok(mi_from_counts(&pair_counts(trace, l)))
}

/// Mutual information in bits of a joint given as counts.
pub fn mi_from_counts(joint: &[Vec<usize>]) -> f64 {
    let rows: Vec<u128> = joint.iter().map(|r| r.iter().map(|&c| c as u128).sum()).collect();
    let width = joint.first().map_or(0, Vec::len);
    let cols: Vec<u128> = (0..width).map(|j| joint.iter().map(|r| r[j] as u128).sum()).collect();
    let n: u128 = rows.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let mut terms = Vec::new();
    for (i, row) in joint.iter().enumerate() {
        for (j, &c) in row.iter().enumerate().filter(|e| *e.1 > 0) {
            // integer ratio, so a factorized joint gives exactly log2(1) = 0
            let ratio = (c as u128 * n) as f64 / (rows[i] * cols[j]) as f64;
            terms.push(c as f64 / n as f64 * ratio.log2());
        }
    }
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().max(0.0)
}

/// Mutual information in bits of a joint probability table.
pub fn mi_from_joint(joint: &[Vec<f64>]) -> f64 {
    let width = joint.first().map_or(0, Vec::len);
    let rows: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..width).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut s = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate().filter(|e| *e.1 > 0.0) {
            s += p * (p / (rows[i] * cols[j])).log2();
        }
    }
    s.max(0.0)
}
