use crate::error::{Error, Result};
use crate::router::{
    balance_term, moe_combine, top_k_constrained, top_k_into, CombineOptions, RoutingDecision, Selection, StrategyKind,
};
use crate::tensor::{AttnDims, Real, Tape, Var};
use crate::trainer::PathTrie;

use super::{BoundModel, Model, Positions};

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Constrain each token's top-1 expert to the trie.
    pub restrict: Option<&'a PathTrie>,
    /// Per-layer dispatch maps: decision index `i` runs on expert
    /// `dispatch[l][i]`.
    pub dispatch: Option<&'a [Vec<usize>]>,
}

/// Routing at one layer for every token of the batch.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    pub probs: Var,
    pub sel: Selection,
}

pub struct Forward {
    pub logits: Var,
    pub layers: Vec<LayerRouting>,
    pub n_tokens: usize,
}

pub struct Loss {
    pub total: Var,
    pub ce: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eval {
    /// Mean next-token cross-entropy in nats.
    pub ce: f64,
    pub ppl: f64,
    pub tokens: usize,
}

impl Forward {
    /// Top-1 expert path of token `t`.
    pub fn path(&self, t: usize) -> Vec<usize> {
        self.layers.iter().map(|l| l.sel.row(t)[0]).collect()
    }

    /// Top-k assignment counts per expert at `layer`.
    pub fn loads(&self, layer: usize, n_experts: usize) -> Vec<usize> {
        let mut c = vec![0; n_experts];
        for &e in &self.layers[layer].sel.topk {
            c[e] += 1;
        }
        c
    }

    /// Gates of every selection at `layer`, flattened like the selection.
    pub fn gates<T: Real>(&self, tape: &Tape<T>, layer: usize, renormalize: bool) -> Vec<T> {
        let lr = &self.layers[layer];
        let p = tape.data(lr.probs);
        let n_exp = tape.shape(lr.probs)[1];
        let k = lr.sel.k;
        let mut out = Vec::with_capacity(lr.sel.topk.len());
        for t in 0..self.n_tokens {
            let row = lr.sel.row(t);
            let s = if renormalize { row.iter().map(|&e| p[t * n_exp + e]).fold(T::zero(), |a, b| a + b) } else { T::one() };
            out.extend(row.iter().map(|&e| p[t * n_exp + e] / s));
        }
        debug_assert_eq!(out.len(), self.n_tokens * k);
        out
    }

    /// Full routing decisions at `layer`.
    pub fn decisions<T: Real>(&self, tape: &Tape<T>, layer: usize, renormalize: bool) -> Vec<RoutingDecision<T>> {
        let lr = &self.layers[layer];
        let p = tape.data(lr.probs);
        let n_exp = tape.shape(lr.probs)[1];
        let gates = self.gates(tape, layer, renormalize);
        let k = lr.sel.k;
        (0..self.n_tokens)
            .map(|t| RoutingDecision {
                probs: p[t * n_exp..(t + 1) * n_exp].to_vec(),
                topk_indices: lr.sel.row(t).to_vec(),
                gates: gates[t * k..(t + 1) * k].to_vec(),
                layer,
            })
            .collect()
    }
}

fn select<T: Real>(
    probs: &[T],
    n_exp: usize,
    k: usize,
    trie: Option<(&PathTrie, &mut [usize])>,
) -> Result<Selection> {
    let n = probs.len() / n_exp;
    let mut topk = vec![0; n * k];
    match trie {
        None => {
            for (row, out) in probs.chunks_exact(n_exp).zip(topk.chunks_exact_mut(k)) {
                top_k_into(row, out);
            }
        }
        Some((trie, cursors)) => {
            for ((row, out), cur) in probs.chunks_exact(n_exp).zip(topk.chunks_exact_mut(k)).zip(cursors.iter_mut()) {
                top_k_constrained(row, trie.allowed(*cur), out)?;
                // past the last layer the cursor is never read again
                *cur = trie.step(*cur, out[0]).unwrap_or(*cur);
            }
        }
    }
    Ok(Selection { k, topk })
}

impl<T: Real> Model<T> {
    /// Forward pass over `batch` rows of `seq` tokens laid out row-major.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel<'_, T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let c = &self.config;
        if tokens.len() != batch * seq || tokens.is_empty() {
            return Err(Error::shape("forward", format!("{} tokens for a {batch} x {seq} batch", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} out of range for vocabulary {}", c.vocab_size)));
        }
        if c.positions == Positions::Learned && seq > c.seq_len {
            return Err(Error::shape("forward", format!("sequence of {seq} exceeds seq_len {}", c.seq_len)));
        }
        if let Some(trie) = opts.restrict {
            if trie.depth() != c.n_layers || trie.n_experts() != c.n_experts {
                return Err(Error::invalid("path trie does not match the model's layers and experts"));
            }
            if c.strategy.kind == StrategyKind::MonoShared && c.strategy.block_size > 1 {
                return Err(Error::invalid("path restriction is undefined when decisions are shared within blocks"));
            }
        }
        if let Some(d) = opts.dispatch {
            if d.len() != c.n_layers {
                return Err(Error::invalid(format!("{} dispatch maps for {} layers", d.len(), c.n_layers)));
            }
        }
        let n = tokens.len();
        let body = &bound.body;
        let idx = &self.idx;

        let mut x = tape.embedding(body[idx.tok_emb], tokens)?;
        if let Some(pe) = idx.pos_emb {
            let pos: Vec<usize> = (0..n).map(|i| i % seq).collect();
            let p = tape.embedding(body[pe], &pos)?;
            x = tape.add(x, p)?;
        }
        let dims = AttnDims { batch, seq, heads: c.n_heads, d_model: c.d_model };
        let mut cursors = opts.restrict.map(|t| vec![t.root(); n]);
        let mut layers: Vec<LayerRouting> = Vec::with_capacity(c.n_layers);

        for (l, li) in idx.layers.iter().enumerate() {
            let h = tape.layer_norm(x, body[li.ln1.0], body[li.ln1.1])?;
            let mut qkv = tape.linear(h, body[li.wqkv])?;
            if c.positions == Positions::Rotary {
                qkv = tape.rope(qkv, dims)?;
            }
            let a = tape.attention(qkv, dims)?;
            let a = tape.linear(a, body[li.wo])?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, body[li.ln2.0], body[li.ln2.1])?;
            let head = c.strategy.decision_layer(l);
            let routing = if head == l {
                let probs = bound.router.route_probs(tape, h, l)?;
                let trie = opts.restrict.zip(cursors.as_deref_mut());
                let sel = select(tape.data(probs), c.n_experts, c.top_k, trie)?;
                LayerRouting { probs, sel }
            } else {
                layers[head].clone()
            };
            let copts = CombineOptions { renormalize: c.renormalize_gates, dispatch: opts.dispatch.map(|d| &d[l][..]) };
            let y = moe_combine(tape, h, routing.probs, &routing.sel, copts, |tape, e, xe| {
                let (w1, w2) = li.experts[e];
                let u = tape.linear(xe, body[w1])?;
                let u = tape.gelu(u)?;
                tape.linear(u, body[w2])
            })?;
            x = tape.add(x, y)?;
            layers.push(routing);
        }

        let x = tape.layer_norm(x, body[idx.ln_f.0], body[idx.ln_f.1])?;
        let logits = tape.linear(x, body[idx.head])?;
        Ok(Forward { logits, layers, n_tokens: n })
    }

    /// Cross-entropy against `targets` plus `alpha` times the summed
    /// per-layer balance term. With `alpha == 0` the total is the
    /// cross-entropy node itself.
    pub fn loss(&self, tape: &mut Tape<T>, fwd: &Forward, targets: &[usize]) -> Result<Loss> {
        let ce = tape.cross_entropy(fwd.logits, targets)?;
        let alpha = self.config.alpha;
        if alpha == 0.0 || fwd.layers.is_empty() {
            return Ok(Loss { total: ce, ce, aux: None });
        }
        let mut aux: Option<Var> = None;
        for lr in &fwd.layers {
            let term = balance_term(tape, lr.probs, &lr.sel, alpha)?;
            aux = Some(match aux {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        let aux = aux.expect("at least one layer");
        let total = tape.add(ce, aux)?;
        Ok(Loss { total, ce, aux: Some(aux) })
    }

    /// Perplexity over a held-out stream, evaluated in non-overlapping
    /// windows of `seq_len` predictions, `rows` windows per pass.
    pub fn evaluate(&self, stream: &[usize], rows: usize, opts: ForwardOptions<'_>) -> Result<Eval> {
        let seq = self.config.seq_len;
        if stream.len() < 2 {
            return Err(Error::Data("evaluation stream needs at least two tokens".into()));
        }
        let win = seq.min(stream.len() - 1);
        let starts: Vec<usize> = (0..).map(|i| i * win).take_while(|&s| s + win < stream.len()).collect();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in starts.chunks(rows.max(1)) {
            let mut inputs = Vec::with_capacity(chunk.len() * win);
            let mut targets = Vec::with_capacity(chunk.len() * win);
            for &s in chunk {
                inputs.extend_from_slice(&stream[s..s + win]);
                targets.extend_from_slice(&stream[s + 1..s + win + 1]);
            }
            let mut tape = Tape::inference();
            let bound = self.bind(&mut tape)?;
            let fwd = self.forward(&mut tape, &bound, &inputs, chunk.len(), win, opts)?;
            let ce = tape.cross_entropy(fwd.logits, &targets)?;
            total += tape.data(ce)[0].as_f64() * targets.len() as f64;
            count += targets.len();
        }
        let ce = total / count as f64;
        Ok(Eval { ce, ppl: ce.exp(), tokens: count })
    }
}
