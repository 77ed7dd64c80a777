use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

use super::combine::Selection;
use super::decision::RoutingDecision;

/// Assignment fractions `f_i`: top-k picks of expert `i` over `tokens * k`,
/// so the fractions sum to one.
pub fn assignment_fractions(sel: &Selection, n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_experts];
    for &e in &sel.topk {
        counts[e] += 1;
    }
    let total = sel.topk.len() as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// One layer's balance term `alpha * N * sum_i f_i P_i`.
pub fn layer_balance_loss<T: Real>(decisions: &[RoutingDecision<T>], alpha: f64) -> Result<f64> {
    let first = decisions.first().ok_or_else(|| Error::invalid("load-balance loss of an empty batch"))?;
    let n = first.probs.len();
    let mut counts = vec![0usize; n];
    let mut mean_p = vec![0.0f64; n];
    let mut picks = 0usize;
    for d in decisions {
        if d.probs.len() != n {
            return Err(Error::shape("load_balance_loss", format!("{} vs {n} experts", d.probs.len())));
        }
        for &e in &d.topk_indices {
            counts[e] += 1;
        }
        picks += d.topk_indices.len();
        for (m, &p) in mean_p.iter_mut().zip(&d.probs) {
            *m += p.as_f64();
        }
    }
    let tokens = decisions.len() as f64;
    let dot: f64 = counts.iter().zip(&mean_p).map(|(&c, &p)| (c as f64 / picks as f64) * (p / tokens)).sum();
    Ok(alpha * n as f64 * dot)
}

/// Sum of [`layer_balance_loss`] over layers; `layers[l]` holds the batch's
/// decisions at layer `l`.
pub fn load_balance_loss<T: Real>(layers: &[Vec<RoutingDecision<T>>], alpha: f64) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::invalid("load-balance loss needs at least one layer"));
    }
    layers.iter().map(|l| layer_balance_loss(l, alpha)).sum()
}

/// Differentiable layer term: `f` is held constant, gradients flow through
/// the mean probabilities.
pub fn balance_term<T: Real>(tape: &mut Tape<T>, probs: Var, sel: &Selection, alpha: f64) -> Result<Var> {
    let n_exp = tape.shape(probs).last().copied().unwrap_or(0);
    if sel.topk.is_empty() {
        return Err(Error::invalid("load-balance loss of an empty batch"));
    }
    let f = assignment_fractions(sel, n_exp);
    let w: Vec<f64> = f.iter().map(|&fi| alpha * n_exp as f64 * fi).collect();
    let mean = tape.mean_rows(probs)?;
    tape.weighted_sum(mean, &w)
}
