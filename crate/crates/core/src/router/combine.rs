use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

use super::decision::RoutingDecision;

/// `y = sum_j gates[j] * F_{topk[j]}(x)` for a single token.
pub fn combine_experts<T: Real, F>(x: &[T], decision: &RoutingDecision<T>, experts: &[F]) -> Result<Vec<T>>
where
    F: Fn(&[T]) -> Vec<T>,
{
    let mut y: Option<Vec<T>> = None;
    for (&e, &g) in decision.topk_indices.iter().zip(&decision.gates) {
        let f = experts
            .get(e)
            .ok_or_else(|| Error::invalid(format!("expert {e} out of range for {} experts", experts.len())))?;
        let out = f(x);
        let acc = y.get_or_insert_with(|| vec![T::zero(); out.len()]);
        if acc.len() != out.len() {
            return Err(Error::shape("combine_experts", format!("expert {e} returned {} values, expected {}", out.len(), acc.len())));
        }
        for (a, v) in acc.iter_mut().zip(out) {
            *a += g * v;
        }
    }
    y.ok_or_else(|| Error::invalid("decision selects no experts"))
}

/// Top-k selections for a batch of `n` rows, flattened row-major as
/// `topk[t * k + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub k: usize,
    pub topk: Vec<usize>,
}

impl Selection {
    pub fn n_rows(&self) -> usize {
        self.topk.len() / self.k
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.topk[t * self.k..(t + 1) * self.k]
    }
}

/// Options for [`moe_combine`].
#[derive(Clone, Copy, Debug, Default)]
pub struct CombineOptions<'a> {
    /// Renormalize the selected gates to sum to one.
    pub renormalize: bool,
    /// Decision index `i` is executed by expert `dispatch[i]` while keeping
    /// gate `p_i`. `None` is the identity.
    pub dispatch: Option<&'a [usize]>,
}

/// Sparse MoE combine on a tape. `x` is `(n x d)`, `probs` is `(n x N)`;
/// each expert only sees its routed rows, so unselected experts get no
/// gradient from a token. `expert(tape, e, rows)` applies `F_e`.
pub fn moe_combine<T: Real, F>(
    tape: &mut Tape<T>,
    x: Var,
    probs: Var,
    sel: &Selection,
    opts: CombineOptions<'_>,
    mut expert: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape<T>, usize, Var) -> Result<Var>,
{
    let (n, d) = match tape.shape(x) {
        [n, d] => (*n, *d),
        s => return Err(Error::shape("moe_combine", format!("input must be a matrix, got {s:?}"))),
    };
    let n_exp = match tape.shape(probs) {
        [m, e] if *m == n => *e,
        s => return Err(Error::shape("moe_combine", format!("probs {s:?} for {n} rows"))),
    };
    let k = sel.k;
    if k == 0 || sel.topk.len() != n * k {
        return Err(Error::shape("moe_combine", format!("{} selections for {n} rows with k={k}", sel.topk.len())));
    }
    if let Some(&bad) = sel.topk.iter().find(|&&e| e >= n_exp) {
        return Err(Error::invalid(format!("expert index {bad} out of range for {n_exp} experts")));
    }
    if let Some(p) = opts.dispatch {
        if p.len() != n_exp || p.iter().any(|&e| e >= n_exp) {
            return Err(Error::invalid(format!("dispatch map of length {} for {n_exp} experts", p.len())));
        }
    }

    // gate source and the flat index of gate (t, j) within it
    let (gsrc, flat_n) = if opts.renormalize { (tape.renorm_gates(probs, &sel.topk, k)?, k) } else { (probs, n_exp) };

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_exp];
    let mut gidx: Vec<Vec<usize>> = vec![Vec::new(); n_exp];
    for t in 0..n {
        for (j, &e) in sel.row(t).iter().enumerate() {
            let runner = opts.dispatch.map_or(e, |p| p[e]);
            rows[runner].push(t);
            gidx[runner].push(if opts.renormalize { t * flat_n + j } else { t * flat_n + e });
        }
    }

    let mut parts = Vec::new();
    for e in 0..n_exp {
        if rows[e].is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows[e])?;
        let he = expert(tape, e, xe)?;
        if tape.shape(he) != [rows[e].len(), d] {
            return Err(Error::shape("moe_combine", format!("expert {e} output {:?}", tape.shape(he))));
        }
        let ge = tape.gather_elems(gsrc, &gidx[e])?;
        let ye = tape.mul_rows(he, ge)?;
        parts.push((ye, std::mem::take(&mut rows[e])));
    }
    tape.scatter_rows(parts, n, d)
}
