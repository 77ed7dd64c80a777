//! Finite-difference checks of every tape kernel and of a full one-layer
//! MoE language-model loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{grad_check, AttnDims, Tape, Tensor, Var};

/// Tolerance on the worst relative error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn probe(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let n = t.value(v).numel();
    let w = rand_tensor(&[n], seed).into_data();
    t.weighted_sum(v, &w)
}

fn k(t: &mut Tape<f64>, shape: &[usize], seed: u64) -> Result<Var> {
    t.constant(rand_tensor(shape, seed))
}

type Case = (&'static str, Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>);

fn kernel_cases() -> Vec<Case> {
    let c = |shape: &[usize], seed| rand_tensor(shape, seed);
    let attn = AttnDims { batch: 2, seq: 4, heads: 2, d_model: 4 };
    let rope = AttnDims { batch: 2, seq: 3, heads: 2, d_model: 8 };
    let gates_in = Tensor::new([3, 4], c(&[3, 4], 100).data().iter().map(|v| v + 1.5).collect()).expect("shape");
    let lg = c(&[6], 21);
    let lb = c(&[6], 22);
    let lx = c(&[3, 6], 20);
    let (lg2, lb2, lx2) = (lg.clone(), lb.clone(), lx.clone());
    let (lg3, lb3, lx3) = (lg.clone(), lb.clone(), lx.clone());
    vec![
        ("matmul.lhs", c(&[3, 4], 100), Box::new(|t, v| { let b = k(t, &[4, 2], 1)?; t.matmul(v, b) })),
        ("matmul.rhs", c(&[4, 2], 100), Box::new(|t, v| { let a = k(t, &[3, 4], 1)?; t.matmul(a, v) })),
        ("linear.input", c(&[3, 4], 100), Box::new(|t, v| { let w = k(t, &[5, 4], 2)?; t.linear(v, w) })),
        ("linear.weight", c(&[5, 4], 100), Box::new(|t, v| { let x = k(t, &[3, 4], 2)?; t.linear(x, v) })),
        ("add", c(&[2, 3], 100), Box::new(|t, v| { let b = k(t, &[2, 3], 3)?; t.add(v, b) })),
        ("add_tiled", c(&[2, 3], 100), Box::new(|t, v| { let x = k(t, &[6, 3], 3)?; t.add_tiled(x, v) })),
        ("mul", c(&[2, 3], 100), Box::new(|t, v| t.mul(v, v))),
        ("scale", c(&[4], 100), Box::new(|t, v| t.scale(v, -1.7))),
        ("sum", c(&[2, 2], 100), Box::new(|t, v| t.sum(v))),
        ("softmax", c(&[3, 5], 100), Box::new(|t, v| t.softmax(v))),
        ("layer_norm.input", lx, Box::new(move |t, v| { let (g, b) = (t.constant(lg.clone())?, t.constant(lb.clone())?); t.layer_norm(v, g, b) })),
        ("layer_norm.gain", lg2, Box::new(move |t, v| { let (x, b) = (t.constant(lx2.clone())?, t.constant(lb2.clone())?); t.layer_norm(x, v, b) })),
        ("layer_norm.bias", lb3, Box::new(move |t, v| { let (x, g) = (t.constant(lx3.clone())?, t.constant(lg3.clone())?); t.layer_norm(x, g, v) })),
        ("gelu", c(&[3, 4], 100), Box::new(|t, v| { let s = t.scale(v, 2.5)?; t.gelu(s) })),
        ("silu", c(&[3, 4], 100), Box::new(|t, v| { let s = t.scale(v, 2.5)?; t.silu(s) })),
        ("embedding", c(&[5, 3], 100), Box::new(|t, v| t.embedding(v, &[4, 0, 4, 2]))),
        ("attention", c(&[8, 12], 30), Box::new(move |t, v| { let s = t.scale(v, 2.0)?; t.attention(s, attn) })),
        ("rope", c(&[6, 24], 33), Box::new(move |t, v| t.rope(v, rope))),
        ("gather_rows", c(&[4, 3], 100), Box::new(|t, v| t.gather_rows(v, &[3, 1, 3]))),
        ("scatter_rows", c(&[3, 2], 40), Box::new(|t, v| { let o = k(t, &[2, 2], 41)?; t.scatter_rows(vec![(v, vec![0, 3, 1]), (o, vec![3, 2])], 4, 2) })),
        ("gather_elems", c(&[3, 4], 100), Box::new(|t, v| t.gather_elems(v, &[0, 5, 11, 5]))),
        ("mul_rows", c(&[3, 1], 51), Box::new(|t, v| { let x = k(t, &[3, 4], 50)?; t.mul_rows(x, v) })),
        ("mean_rows", c(&[4, 3], 100), Box::new(|t, v| t.mean_rows(v))),
        ("l2_normalize_rows", c(&[3, 4], 100), Box::new(|t, v| t.l2_normalize_rows(v))),
        ("div_scalar", Tensor::from_f64([1], &[0.37]).expect("shape"), Box::new(|t, v| { let x = k(t, &[2, 3], 60)?; t.div_scalar(x, v) })),
        ("renorm_gates", gates_in, Box::new(|t, v| t.renorm_gates(v, &[1, 3, 0, 2, 2, 1], 2))),
        ("cross_entropy", c(&[4, 6], 100), Box::new(|t, v| { let s = t.scale(v, 3.0)?; t.cross_entropy(s, &[0, 5, 2, 2]) })),
    ]
}

/// A one-layer, four-expert, top-2 model with a load-balancing term,
/// probed at a well-conditioned point (matrices scaled up from init).
fn layer_model() -> Result<Model<f64>> {
    let cfg = ModelConfig {
        n_layers: 1,
        n_experts: 4,
        top_k: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 6,
        vocab_size: 11,
        seq_len: 5,
        alpha: 0.05,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::init(cfg, 12)?;
    let scale = |store: &mut ParamStore<f64>| {
        for e in store.entries_mut() {
            if e.tensor.shape().len() == 2 {
                e.tensor.data_mut().iter_mut().for_each(|v| *v *= 25.0);
            }
        }
    };
    scale(m.body_mut());
    scale(m.router_mut().params_mut());
    Ok(m)
}

/// Runs every check at step `eps`. Kernel outputs are reduced to a scalar
/// with fixed random weights.
pub fn gradient_suite(eps: f64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (i, (name, x, f)) in kernel_cases().into_iter().enumerate() {
        let err = grad_check(|t, v| { let y = f(t, v)?; probe(t, y, 7 + i as u64) }, &x, eps)?;
        rows.push(GradCheckRow { name: format!("kernel.{name}"), max_rel_error: err });
    }
    let m = layer_model()?;
    let toks = vec![1, 4, 2, 9, 0, 3, 3, 7, 10, 5];
    let targets: Vec<usize> = toks.iter().map(|t| (t + 1) % 11).collect();
    for (name, x) in m.named_tensors() {
        let x = x.clone();
        let err = grad_check(
            |tape, v| {
                let mut b = m.bind(tape)?;
                b.replace(&name, v)?;
                let f = m.forward(tape, &b, &toks, 2, 5, ForwardOptions::default())?;
                Ok(m.loss(tape, &f, &targets)?.total)
            },
            &x,
            eps,
        )?;
        rows.push(GradCheckRow { name: format!("moe_layer_loss.{name}"), max_rel_error: err });
    }
    Ok(rows)
}
