use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Eval, ForwardOptions, Model};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Perturbation {
    pub p: f64,
    pub seed: u64,
    pub base_ppl: f64,
    pub perturbed_ppl: f64,
    /// `(perturbed - base) / base * 100`.
    pub delta_pct: f64,
    /// Layers whose expert order was replaced.
    pub permuted_layers: Vec<usize>,
}

/// Per-layer expert dispatch maps: each layer independently, with
/// probability `p`, gets a uniformly random permutation.
pub fn random_dispatch(n_layers: usize, n_experts: usize, p: f64, seed: u64) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("permutation probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(n_layers);
    let mut hit = Vec::new();
    for l in 0..n_layers {
        let mut m: Vec<usize> = (0..n_experts).collect();
        if rng.random_bool(p) {
            m.shuffle(&mut rng);
            hit.push(l);
        }
        maps.push(m);
    }
    Ok((maps, hit))
}

/// Relative perplexity change when routed tokens are sent to permuted
/// experts. Router decisions are untouched; only the expert that executes
/// decision `i` at a permuted layer changes.
pub fn perturb_and_eval<T: Real>(model: &Model<T>, p: f64, eval: &[usize], rows: usize, seed: u64) -> Result<Perturbation> {
    let base = model.evaluate(eval, rows, ForwardOptions::default())?;
    perturb_against(model, &base, p, eval, rows, seed)
}

/// [`perturb_and_eval`] against an already computed unperturbed `base`
/// on the same stream, for sweeping many seeds.
pub fn perturb_against<T: Real>(model: &Model<T>, base: &Eval, p: f64, eval: &[usize], rows: usize, seed: u64) -> Result<Perturbation> {
    let c = model.config();
    let (maps, hit) = random_dispatch(c.n_layers, c.n_experts, p, seed)?;
    let perturbed = if hit.is_empty() {
        base.clone()
    } else {
        model.evaluate(eval, rows, ForwardOptions { restrict: None, dispatch: Some(&maps) })?
    };
    Ok(Perturbation {
        p,
        seed,
        base_ppl: base.ppl,
        perturbed_ppl: perturbed.ppl,
        delta_pct: (perturbed.ppl - base.ppl) / base.ppl * 100.0,
        permuted_layers: hit,
    })
}
