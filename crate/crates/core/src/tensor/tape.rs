//! Recording tape for reverse-mode differentiation.
//!
//! Every kernel evaluates eagerly and, when one of its inputs requires a
//! gradient, appends a node carrying what its backward rule needs. Nodes are
//! only ever appended, so the node order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};

use super::real::{gemm, MatLayout};
use super::value::rows_cols;
use super::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused `[q | k | v]` activation of shape `(batch*seq, 3*d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn validate(&self, shape: &[usize], op: &'static str) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::shape(op, format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        let want = [self.batch * self.seq, 3 * self.d_model];
        if shape != want {
            return Err(Error::shape(op, format!("expected qkv {want:?}, got {shape:?}")));
        }
        Ok(())
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    Add { a: Var, b: Var },
    AddTiled { x: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Silu { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { qkv: Var, dims: AttnDims, probs: Vec<T> },
    Rope { x: Var, dims: AttnDims },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { parts: Vec<(Var, Vec<usize>)> },
    GatherElems { x: Var, idx: Vec<usize> },
    MulRows { x: Var, g: Var },
    MeanRows { x: Var },
    WeightedSum { x: Var, w: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    DivScalar { x: Var, s: Var },
    RenormGates { probs: Var, topk: Vec<usize>, k: usize, sums: Vec<T> },
}

/// One recorded value. `requires_grad` is true for trainable leaves and for
/// every node downstream of one.
pub struct TensorNode<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

impl<T: Real> TensorNode<T> {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Gradient map produced by [`Tape::backward`]; indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<TensorNode<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const ROPE_BASE: f64 = 10_000.0;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that evaluates kernels but never records backward state.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TensorNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input. Non-finite inputs are rejected here so every kernel
    /// downstream starts from finite data.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf input"));
        }
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(TensorNode { value, requires_grad, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, inputs_rg: bool, op: Op<T>) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs_rg && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(TensorNode { value: Tensor::from_parts(shape, data), requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ----- forward kernels -------------------------------------------------

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.data(a), MatLayout::dense(m, k), self.data(b), MatLayout::dense(k, n), T::zero(), &mut out, MatLayout::dense(m, n));
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, n], out, rg, Op::MatMul { a, b })
    }

    /// `x (m x k) * w^T` with `w` stored as `(n x k)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.matrix(x, "linear")?;
        let (n, k2) = self.matrix(w, "linear")?;
        if k != k2 {
            return Err(Error::shape("linear", format!("input [{m}, {k}] vs weight [{n}, {k2}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.data(x), MatLayout::dense(m, k), self.data(w), MatLayout::dense(n, k).t(), T::zero(), &mut out, MatLayout::dense(m, n));
        let rg = self.rg(x) || self.rg(w);
        self.push("linear", vec![m, n], out, rg, Op::Linear { x, w })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", self.shape(a).to_vec(), out, rg, Op::Add { a, b })
    }

    /// Adds `b (r x n)` to every block of `r` consecutive rows of `x (m x n)`.
    pub fn add_tiled(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        let (r, n2) = rows_cols(self.shape(b));
        if n != n2 || r == 0 || m % r != 0 {
            return Err(Error::shape("add_tiled", format!("{:?} vs tile {:?}", self.shape(x), self.shape(b))));
        }
        let bd = self.data(b);
        let out = self
            .data(x)
            .chunks_exact(n)
            .enumerate()
            .flat_map(|(i, row)| {
                let brow = &bd[(i % r) * n..(i % r + 1) * n];
                row.iter().zip(brow).map(|(&p, &q)| p + q)
            })
            .collect();
        let rg = self.rg(x) || self.rg(b);
        self.push("add_tiled", self.shape(x).to_vec(), out, rg, Op::AddTiled { x, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", self.shape(a).to_vec(), out, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.data(x).iter().map(|&v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), out, self.rg(x), Op::Scale { x, c })
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.data(x) {
            s += v;
        }
        self.push("sum", vec![1], vec![s], self.rg(x), Op::Sum { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", self.shape(x).to_vec(), out, self.rg(x), Op::Softmax { x })
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("features {n} vs gain {:?} / bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let nf = T::of(n as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        let (g, b) = (self.data(gain), self.data(bias));
        for (i, row) in self.data(x).chunks_exact(n).enumerate() {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= nf;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push("layer_norm", self.shape(x).to_vec(), out, rg, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| gelu_value(v)).collect();
        self.push("gelu", self.shape(x).to_vec(), out, self.rg(x), Op::Gelu { x })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push("silu", self.shape(x).to_vec(), out, self.rg(x), Op::Silu { x })
    }

    /// Row lookup into `table (V x d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} out of range for table of {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.push("embedding", vec![ids.len(), d], out, self.rg(table), Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Causal multi-head scaled dot-product attention over a fused `[q|k|v]`
    /// activation. Returns `(batch*seq, d_model)`.
    pub fn attention(&mut self, qkv: Var, dims: AttnDims) -> Result<Var> {
        dims.validate(self.shape(qkv), "attention")?;
        let AttnDims { batch, seq, heads, d_model: d } = dims;
        let dh = dims.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let src = self.data(qkv);
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let tt = MatLayout::dense(seq, seq);
        for b in 0..batch {
            for h in 0..heads {
                let (q, k, v) = qkv_views(dims, b, h);
                let p_off = (b * heads + h) * seq * seq;
                gemm(scale, src, q, src, k.t(), T::zero(), &mut probs, tt.at(p_off));
                for i in 0..seq {
                    let row = &mut probs[p_off + i * seq..p_off + (i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    for p in &mut row[i + 1..] {
                        *p = T::zero();
                    }
                }
                let o = MatLayout { offset: b * seq * d + h * dh, rows: seq, cols: dh, rs: d, cs: 1 };
                gemm(T::one(), &probs, tt.at(p_off), src, v, T::zero(), &mut out, o);
            }
        }
        self.push("attention", vec![batch * seq, d], out, self.rg(qkv), Op::Attention { qkv, dims, probs })
    }

    /// Rotary position encoding applied to the q and k thirds of a fused
    /// `[q|k|v]` activation; v passes through.
    pub fn rope(&mut self, qkv: Var, dims: AttnDims) -> Result<Var> {
        dims.validate(self.shape(qkv), "rope")?;
        if dims.head_dim() % 2 != 0 {
            return Err(Error::shape("rope", format!("head dim {} must be even", dims.head_dim())));
        }
        let mut out = self.data(qkv).to_vec();
        rope_apply(&mut out, dims, false);
        self.push("rope", self.shape(qkv).to_vec(), out, self.rg(qkv), Op::Rope { x: qkv, dims })
    }

    /// Mean negative log-likelihood (nats) of integer targets under
    /// row-wise softmax of `logits (m x V)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", format!("{m} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} out of range for {v} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let loss = total / T::of(m as f64);
        self.push("cross_entropy", vec![1], vec![loss], self.rg(logits), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {m} rows")));
        }
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows selected"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xd[r * n..(r + 1) * n]);
        }
        self.push("gather_rows", vec![rows.len(), n], out, self.rg(x), Op::GatherRows { x, rows: rows.to_vec() })
    }

    /// Sums each part's rows into an `(n_rows x cols)` output at the given
    /// destination rows. Parts are added in list order.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, n_rows: usize, cols: usize) -> Result<Var> {
        let mut out = vec![T::zero(); n_rows * cols];
        let mut rg = false;
        for (v, dest) in &parts {
            let (m, n) = rows_cols(self.shape(*v));
            if n != cols || m != dest.len() {
                return Err(Error::shape(
                    "scatter_rows",
                    format!("part {:?} vs {} destinations of width {cols}", self.shape(*v), dest.len()),
                ));
            }
            if let Some(&bad) = dest.iter().find(|&&r| r >= n_rows) {
                return Err(Error::shape("scatter_rows", format!("destination {bad} out of range for {n_rows} rows")));
            }
            let src = self.data(*v);
            for (i, &r) in dest.iter().enumerate() {
                for (o, &s) in out[r * cols..(r + 1) * cols].iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                    *o += s;
                }
            }
            rg |= self.rg(*v);
        }
        self.push("scatter_rows", vec![n_rows, cols], out, rg, Op::ScatterRows { parts })
    }

    /// Picks flat elements of `x` into an `(idx.len() x 1)` column.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_elems", format!("index {bad} out of range for {n} elements")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_elems", "no indices"));
        }
        let xd = self.data(x);
        let out = idx.iter().map(|&i| xd[i]).collect();
        self.push("gather_elems", vec![idx.len(), 1], out, self.rg(x), Op::GatherElems { x, idx: idx.to_vec() })
    }

    /// Scales row `i` of `x (m x n)` by `g[i]`, `g` shaped `(m x 1)`.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if self.shape(g) != [m, 1] {
            return Err(Error::shape("mul_rows", format!("{:?} vs row scales {:?}", self.shape(x), self.shape(g))));
        }
        let gd = self.data(g);
        let out = self
            .data(x)
            .chunks_exact(n)
            .zip(gd)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let rg = self.rg(x) || self.rg(g);
        self.push("mul_rows", self.shape(x).to_vec(), out, rg, Op::MulRows { x, g })
    }

    /// Column means of `x (m x n)` as `(1 x n)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        let mut out = vec![T::zero(); n];
        for row in self.data(x).chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::of(1.0 / m as f64);
        for o in &mut out {
            *o *= inv;
        }
        self.push("mean_rows", vec![1, n], out, self.rg(x), Op::MeanRows { x })
    }

    /// `sum_i w_i * x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {:?}", w.len(), self.shape(x))));
        }
        let w: Vec<T> = w.iter().map(|&v| T::of(v)).collect();
        let mut s = T::zero();
        for (&a, &b) in self.data(x).iter().zip(&w) {
            s += a * b;
        }
        self.push("weighted_sum", vec![1], vec![s], self.rg(x), Op::WeightedSum { x, w })
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        let mut out = self.data(x).to_vec();
        let mut norms = vec![T::zero(); m];
        for (row, nrm) in out.chunks_exact_mut(n).zip(norms.iter_mut()) {
            let mut s = T::zero();
            for &v in row.iter() {
                s += v * v;
            }
            *nrm = s.sqrt().max(T::of(NORM_EPS));
            for v in row.iter_mut() {
                *v /= *nrm;
            }
        }
        self.push("l2_normalize_rows", self.shape(x).to_vec(), out, self.rg(x), Op::L2NormalizeRows { x, norms })
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("div_scalar", format!("divisor shape {:?}", self.shape(s))));
        }
        let sv = self.data(s)[0];
        if sv == T::zero() {
            return Err(Error::invalid("div_scalar: zero divisor"));
        }
        let out = self.data(x).iter().map(|&v| v / sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push("div_scalar", self.shape(x).to_vec(), out, rg, Op::DivScalar { x, s })
    }

    /// Selected probabilities renormalized to sum to one per row:
    /// `out[t, j] = p[t, topk[t*k + j]] / sum_j' p[t, topk[t*k + j']]`.
    pub fn renorm_gates(&mut self, probs: Var, topk: &[usize], k: usize) -> Result<Var> {
        let (m, n) = self.matrix(probs, "renorm_gates")?;
        if k == 0 || topk.len() != m * k || topk.iter().any(|&e| e >= n) {
            return Err(Error::shape("renorm_gates", format!("{} selections for [{m}, {n}] with k={k}", topk.len())));
        }
        let pd = self.data(probs);
        let mut out = vec![T::zero(); m * k];
        let mut sums = vec![T::zero(); m];
        for t in 0..m {
            let mut s = T::zero();
            for j in 0..k {
                s += pd[t * n + topk[t * k + j]];
            }
            sums[t] = s;
            for j in 0..k {
                out[t * k + j] = pd[t * n + topk[t * k + j]] / s;
            }
        }
        self.push("renorm_gates", vec![m, k], out, self.rg(probs), Op::RenormGates { probs, topk: topk.to_vec(), k, sums })
    }

    // ----- reverse sweep ---------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Every leaf that requires a
    /// gradient gets an entry; leaves the loss does not touch get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn backprop(&self, op: &Op<T>, node: &TensorNode<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = rows_cols(self.shape(*b)).1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    gemm(T::one(), g, MatLayout::dense(m, n), bd, MatLayout::dense(k, n).t(), T::one(), ga, MatLayout::dense(m, k));
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm(T::one(), ad, MatLayout::dense(m, k).t(), g, MatLayout::dense(m, n), T::one(), gb, MatLayout::dense(k, n));
                }
            }
            Op::Linear { x, w } => {
                let (m, k) = rows_cols(self.shape(*x));
                let n = rows_cols(self.shape(*w)).0;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.buf(grads, *x) {
                    gemm(T::one(), g, MatLayout::dense(m, n), wd, MatLayout::dense(n, k), T::one(), gx, MatLayout::dense(m, k));
                }
                if let Some(gw) = self.buf(grads, *w) {
                    gemm(T::one(), g, MatLayout::dense(m, n).t(), xd, MatLayout::dense(m, k), T::one(), gw, MatLayout::dense(n, k));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.buf(grads, v) {
                        axpy(gv, g, T::one());
                    }
                }
            }
            Op::AddTiled { x, b } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, g, T::one());
                }
                let n = rows_cols(self.shape(*x)).1;
                let r = rows_cols(self.shape(*b)).0;
                if let Some(gb) = self.buf(grads, *b) {
                    for (i, row) in g.chunks_exact(n).enumerate() {
                        axpy(&mut gb[(i % r) * n..(i % r + 1) * n], row, T::one());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Softmax { x } => {
                let n = rows_cols(self.shape(*x)).1;
                if let Some(gx) = self.buf(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)) {
                        let mut dot = T::zero();
                        for (&a, &b) in gr.iter().zip(yr) {
                            dot += a * b;
                        }
                        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = rows_cols(self.shape(*x)).1;
                let gd = self.data(*gain);
                if let Some(gg) = self.buf(grads, *gain) {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((o, &gi), &hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for gr in g.chunks_exact(n) {
                        axpy(gb, gr, T::one());
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let nf = T::of(n as f64);
                    let mut dh = vec![T::zero(); n];
                    for (i, ((gxr, gr), hr)) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            dh[j] = gr[j] * gd[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        for j in 0..n {
                            gxr[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xd = self.data(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Silu { x } => {
                let xd = self.data(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        let s = sigmoid(xi);
                        *o += gi * s * (T::one() + xi * (T::one() - s));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = rows_cols(self.shape(*table)).1;
                if let Some(gt) = self.buf(grads, *table) {
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        axpy(&mut gt[id * d..(id + 1) * d], row, T::one());
                    }
                }
            }
            Op::Attention { qkv, dims, probs } => {
                let src = self.data(*qkv);
                if let Some(gq) = self.buf(grads, *qkv) {
                    attention_backward(*dims, src, probs, g, gq);
                }
            }
            Op::Rope { x, dims } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let mut back = g.to_vec();
                    rope_apply(&mut back, *dims, true);
                    axpy(gx, &back, T::one());
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = rows_cols(self.shape(*logits)).1;
                let scale = g[0] / T::of(targets.len() as f64);
                if let Some(gl) = self.buf(grads, *logits) {
                    for (t, (gr, pr)) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                        for (o, &p) in gr.iter_mut().zip(pr) {
                            *o += scale * p;
                        }
                        gr[targets[t]] -= scale;
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let n = rows_cols(self.shape(*x)).1;
                if let Some(gx) = self.buf(grads, *x) {
                    for (row, &r) in g.chunks_exact(n).zip(rows) {
                        axpy(&mut gx[r * n..(r + 1) * n], row, T::one());
                    }
                }
            }
            Op::ScatterRows { parts } => {
                let n = rows_cols(node.value.shape()).1;
                for (v, dest) in parts {
                    if let Some(gv) = self.buf(grads, *v) {
                        for (i, &r) in dest.iter().enumerate() {
                            axpy(&mut gv[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], T::one());
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for (&gi, &i) in g.iter().zip(idx) {
                        gx[i] += gi;
                    }
                }
            }
            Op::MulRows { x, g: s } => {
                let n = rows_cols(self.shape(*x)).1;
                let (xd, sd) = (self.data(*x), self.data(*s));
                if let Some(gx) = self.buf(grads, *x) {
                    for ((gxr, gr), &si) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(sd) {
                        axpy(gxr, gr, si);
                    }
                }
                if let Some(gs) = self.buf(grads, *s) {
                    for ((o, gr), xr) in gs.iter_mut().zip(g.chunks_exact(n)).zip(xd.chunks_exact(n)) {
                        let mut dot = T::zero();
                        for (&a, &b) in gr.iter().zip(xr) {
                            dot += a * b;
                        }
                        *o += dot;
                    }
                }
            }
            Op::MeanRows { x } => {
                let (m, n) = rows_cols(self.shape(*x));
                let inv = T::of(1.0 / m as f64);
                if let Some(gx) = self.buf(grads, *x) {
                    for row in gx.chunks_exact_mut(n) {
                        axpy(row, g, inv);
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, w, g[0]);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = rows_cols(self.shape(*x)).1;
                if let Some(gx) = self.buf(grads, *x) {
                    for (((gxr, gr), yr), &nrm) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)).zip(norms) {
                        let mut dot = T::zero();
                        for (&a, &b) in gr.iter().zip(yr) {
                            dot += a * b;
                        }
                        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi * dot) / nrm;
                        }
                    }
                }
            }
            Op::DivScalar { x, s } => {
                let sv = self.data(*s)[0];
                let xd = self.data(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, g, T::one() / sv);
                }
                if let Some(gs) = self.buf(grads, *s) {
                    let mut dot = T::zero();
                    for (&a, &b) in g.iter().zip(xd) {
                        dot += a * b;
                    }
                    gs[0] -= dot / (sv * sv);
                }
            }
            Op::RenormGates { probs, topk, k, sums } => {
                let n = rows_cols(self.shape(*probs)).1;
                let k = *k;
                if let Some(gp) = self.buf(grads, *probs) {
                    for (t, &s) in sums.iter().enumerate() {
                        let mut dot = T::zero();
                        for j in 0..k {
                            dot += g[t * k + j] * out[t * k + j];
                        }
                        for j in 0..k {
                            gp[t * n + topk[t * k + j]] += (g[t * k + j] - dot) / s;
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &v in row {
        max = max.max(v);
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Tanh-approximated GELU written as `x * sigmoid(2u)`, which equals
/// `0.5 x (1 + tanh u)` with a single exponential.
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044_715);
    let u = c * (x + a * x * x * x);
    (u, sigmoid(u + u))
}

fn gelu_value<T: Real>(x: T) -> T {
    x * gelu_parts(x).1
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044_715);
    let (_, s) = gelu_parts(x);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    s + (x + x) * s * (T::one() - s) * du
}

fn qkv_views(dims: AttnDims, b: usize, h: usize) -> (MatLayout, MatLayout, MatLayout) {
    let AttnDims { seq, d_model: d, .. } = dims;
    let dh = dims.head_dim();
    let base = MatLayout { offset: b * seq * 3 * d + h * dh, rows: seq, cols: dh, rs: 3 * d, cs: 1 };
    (base, base.at(base.offset + d), base.at(base.offset + 2 * d))
}

fn attention_backward<T: Real>(dims: AttnDims, src: &[T], probs: &[T], g: &[T], gqkv: &mut [T]) {
    let AttnDims { batch, seq, heads, d_model: d } = dims;
    let dh = dims.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let tt = MatLayout::dense(seq, seq);
    let mut ds = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let (q, k, v) = qkv_views(dims, b, h);
            let p_off = (b * heads + h) * seq * seq;
            let o = MatLayout { offset: b * seq * d + h * dh, rows: seq, cols: dh, rs: d, cs: 1 };
            // dV += P^T dO
            gemm(T::one(), probs, tt.at(p_off).t(), g, o, T::one(), gqkv, v);
            // dP = dO V^T
            gemm(T::one(), g, o, src, v.t(), T::zero(), &mut ds, tt);
            for i in 0..seq {
                let p = &probs[p_off + i * seq..p_off + i * seq + i + 1];
                let row = &mut ds[i * seq..(i + 1) * seq];
                let mut dot = T::zero();
                for (&a, &b) in row.iter().zip(p) {
                    dot += a * b;
                }
                for (r, &pi) in row.iter_mut().zip(p) {
                    *r = pi * (*r - dot) * scale;
                }
                for r in &mut row[i + 1..] {
                    *r = T::zero();
                }
            }
            // dQ += dS K ; dK += dS^T Q
            gemm(T::one(), &ds, tt, src, k, T::one(), gqkv, q);
            gemm(T::one(), &ds, tt.t(), src, q, T::one(), gqkv, k);
        }
    }
}

/// Rotates q and k head pairs `(i, i + dh/2)` by position-dependent angles.
/// `inverse` applies the transpose rotation, which is the backward rule.
fn rope_apply<T: Real>(buf: &mut [T], dims: AttnDims, inverse: bool) {
    let AttnDims { seq, heads, d_model: d, .. } = dims;
    let dh = dims.head_dim();
    let half = dh / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row_idx, row) in buf.chunks_exact_mut(3 * d).enumerate() {
        let pos = (row_idx % seq) as f64;
        for i in 0..half {
            let theta = pos / ROPE_BASE.powf(2.0 * i as f64 / dh as f64);
            let (s, c) = (T::of(sign * theta.sin()), T::of(theta.cos()));
            for part in 0..2 {
                for h in 0..heads {
                    let base = part * d + h * dh;
                    let (x1, x2) = (row[base + i], row[base + i + half]);
                    row[base + i] = x1 * c - x2 * s;
                    row[base + i + half] = x1 * s + x2 * c;
                }
            }
        }
    }
}
