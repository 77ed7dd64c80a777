use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects an arbitrary tensor to a scalar with fixed random weights so
/// that no gradient entry cancels by symmetry.
fn probe(t: &mut Tape<f64>, v: Var, seed: u64) -> crate::Result<Var> {
    let n = t.value(v).numel();
    let w = rand_tensor(&[n], seed).into_data();
    t.weighted_sum(v, &w)
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn matmul_identity_and_hand_product() {
    let mut t = Tape::<f64>::inference();
    let eye = t.constant(Tensor::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()).unwrap();
    let a = t.constant(rand_tensor(&[3, 3], 1)).unwrap();
    let p = t.matmul(eye, a).unwrap();
    assert_eq!(t.data(p), t.data(a));

    let x = t.constant(Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap()).unwrap();
    let y = t.constant(Tensor::from_f64([2, 2], &[5., 6., 7., 8.]).unwrap()).unwrap();
    let z = t.matmul(x, y).unwrap();
    assert_eq!(t.data(z), &[19., 22., 43., 50.]);
}

#[test]
fn softmax_symmetry_and_shift_invariance() {
    let mut t = Tape::<f64>::inference();
    let z = t.constant(Tensor::zeros([4])).unwrap();
    let s = t.softmax(z).unwrap();
    assert!(t.data(s).iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let v = rand_tensor(&[2, 5], 3);
    let shifted = Tensor::new([2, 5], v.data().iter().map(|x| x + 17.5).collect()).unwrap();
    let a = t.constant(v).unwrap();
    let b = t.constant(shifted).unwrap();
    let sa = t.softmax(a).unwrap();
    let sb = t.softmax(b).unwrap();
    for (p, q) in t.data(sa).iter().zip(t.data(sb)) {
        assert!((p - q).abs() < 1e-12);
    }
    for row in t.data(sa).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shape_mismatch_names_extents() {
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::zeros([2, 3]), true).unwrap();
    let b = t.leaf(Tensor::zeros([2, 3]), true).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    match err {
        Error::Shape { op, detail } => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_input_rejected() {
    let mut t = Tape::<f32>::new();
    let bad = Tensor::new([2], vec![1.0, f32::NAN]).unwrap();
    assert!(matches!(t.leaf(bad, true), Err(Error::NonFinite(_))));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(rand_tensor(&[2, 3, 2], 4), true).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_half_square_norm_is_identity() {
    let mut t = Tape::<f64>::new();
    let xv = rand_tensor(&[5], 5);
    let x = t.leaf(xv.clone(), true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let loss = t.scale(s, 0.5).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), xv.data());
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(rand_tensor(&[3], 6), true).unwrap();
    let b = t.leaf(rand_tensor(&[4], 7), true).unwrap();
    let loss = t.sum(a).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(b).unwrap(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(rand_tensor(&[3], 6), true).unwrap();
    let b = t.scale(a, 2.0).unwrap();
    assert!(matches!(t.backward(b), Err(Error::Shape { .. })));
}

#[test]
fn grad_check_rejects_bad_eps() {
    let x = rand_tensor(&[2], 1);
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-2).is_err());
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-8).is_err());
}

#[test]
fn grad_check_rejects_non_finite_perturbation() {
    // 1/x blows up at x = 0 after the perturbation
    let x = Tensor::from_f64([1], &[1e-5]).unwrap();
    let res = grad_check(
        |t, v| {
            let one = t.constant(Tensor::scalar(1.0))?;
            let r = t.div_scalar(one, v)?;
            t.sum(r)
        },
        &x,
        1e-5,
    );
    assert!(res.is_err());
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(rand_tensor(&[8, 16], 9).cast(), true).unwrap();
        let w = t.leaf(rand_tensor(&[12, 16], 10).cast(), true).unwrap();
        let y = t.linear(x, w).unwrap();
        let s = t.softmax(y).unwrap();
        t.data(s).to_vec()
    };
    assert_eq!(run(), run());
}

// ----- gradient checks, one per kernel ---------------------------------------

#[test]
fn gradcheck_linear_function_is_exact() {
    let x = rand_tensor(&[6], 11);
    let err = grad_check(|t, v| probe(t, v, 12), &x, EPS).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let x = rand_tensor(&[1, 8], 13);
    let err = grad_check(
        |t, v| {
            let s = t.softmax(v)?;
            let l = t.scale(s, 3.0)?;
            t.cross_entropy(l, &[5])
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

macro_rules! gradcheck_cases {
    ($($name:ident: $shape:expr => |$t:ident, $v:ident| $body:expr;)*) => {$(
        #[test]
        fn $name() {
            let x = rand_tensor(&$shape, 100);
            let err = grad_check(|$t, $v| { let out = $body?; probe($t, out, 7) }, &x, EPS).unwrap();
            assert!(err < TOL, "{} relative error {err}", stringify!($name));
        }
    )*};
}

gradcheck_cases! {
    gc_matmul_lhs: [3, 4] => |t, v| { let b = t.constant(rand_tensor(&[4, 2], 1))?; t.matmul(v, b) };
    gc_matmul_rhs: [4, 2] => |t, v| { let a = t.constant(rand_tensor(&[3, 4], 1))?; t.matmul(a, v) };
    gc_linear_input: [3, 4] => |t, v| { let w = t.constant(rand_tensor(&[5, 4], 2))?; t.linear(v, w) };
    gc_linear_weight: [5, 4] => |t, v| { let x = t.constant(rand_tensor(&[3, 4], 2))?; t.linear(x, v) };
    gc_add: [2, 3] => |t, v| { let b = t.constant(rand_tensor(&[2, 3], 3))?; t.add(v, b) };
    gc_add_self: [2, 3] => |t, v| t.add(v, v);
    gc_add_tiled_x: [6, 3] => |t, v| { let b = t.constant(rand_tensor(&[2, 3], 3))?; t.add_tiled(v, b) };
    gc_add_tiled_tile: [2, 3] => |t, v| { let x = t.constant(rand_tensor(&[6, 3], 3))?; t.add_tiled(x, v) };
    gc_mul: [2, 3] => |t, v| { let b = t.constant(rand_tensor(&[2, 3], 4))?; t.mul(v, b) };
    gc_mul_self: [2, 3] => |t, v| t.mul(v, v);
    gc_scale: [4] => |t, v| t.scale(v, -1.7);
    gc_sum: [2, 2] => |t, v| t.sum(v);
    gc_softmax: [3, 5] => |t, v| t.softmax(v);
    gc_gelu: [3, 4] => |t, v| { let s = t.scale(v, 2.5)?; t.gelu(s) };
    gc_silu: [3, 4] => |t, v| { let s = t.scale(v, 2.5)?; t.silu(s) };
    gc_embedding: [5, 3] => |t, v| t.embedding(v, &[4, 0, 4, 2]);
    gc_gather_rows: [4, 3] => |t, v| t.gather_rows(v, &[3, 1, 3]);
    gc_gather_elems: [3, 4] => |t, v| t.gather_elems(v, &[0, 5, 11, 5]);
    gc_mean_rows: [4, 3] => |t, v| t.mean_rows(v);
    gc_l2_normalize: [3, 4] => |t, v| t.l2_normalize_rows(v);
    gc_cross_entropy: [4, 6] => |t, v| { let s = t.scale(v, 3.0)?; t.cross_entropy(s, &[0, 5, 2, 2]) };
}

#[test]
fn gc_renorm_gates() {
    // positive inputs; through a softmax the unselected logits would have an
    // exactly-zero gradient, which the relative metric cannot score
    let x = Tensor::new([3, 4], rand_tensor(&[3, 4], 100).data().iter().map(|v| v + 1.5).collect()).unwrap();
    let err = grad_check(|t, v| { let y = t.renorm_gates(v, &[1, 3, 0, 2, 2, 1], 2)?; probe(t, y, 7) }, &x, EPS).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gc_layer_norm_all_inputs() {
    let x = rand_tensor(&[3, 6], 20);
    let g = rand_tensor(&[6], 21);
    let b = rand_tensor(&[6], 22);
    let e = grad_check(
        |t, v| {
            let (gv, bv) = (t.constant(g.clone())?, t.constant(b.clone())?);
            let y = t.layer_norm(v, gv, bv)?;
            probe(t, y, 23)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(e < TOL, "x: {e}");
    let e = grad_check(
        |t, v| {
            let (xv, bv) = (t.constant(x.clone())?, t.constant(b.clone())?);
            let y = t.layer_norm(xv, v, bv)?;
            probe(t, y, 23)
        },
        &g,
        EPS,
    )
    .unwrap();
    assert!(e < TOL, "gain: {e}");
    let e = grad_check(
        |t, v| {
            let (xv, gv) = (t.constant(x.clone())?, t.constant(g.clone())?);
            let y = t.layer_norm(xv, gv, v)?;
            probe(t, y, 23)
        },
        &b,
        EPS,
    )
    .unwrap();
    assert!(e < TOL, "bias: {e}");
}

#[test]
fn gc_attention() {
    let dims = AttnDims { batch: 2, seq: 4, heads: 2, d_model: 4 };
    let x = rand_tensor(&[8, 12], 30);
    let err = grad_check(
        |t, v| {
            let s = t.scale(v, 2.0)?;
            let y = t.attention(s, dims)?;
            probe(t, y, 31)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_is_causal() {
    let dims = AttnDims { batch: 1, seq: 3, heads: 1, d_model: 2 };
    let base = rand_tensor(&[3, 6], 32);
    let mut changed = base.clone();
    // perturb the last position's k and v only
    for j in 2..6 {
        changed.data_mut()[2 * 6 + j] += 1.0;
    }
    let mut t = Tape::<f64>::inference();
    let a = t.constant(base).unwrap();
    let b = t.constant(changed).unwrap();
    let ya = t.attention(a, dims).unwrap();
    let yb = t.attention(b, dims).unwrap();
    assert_eq!(&t.data(ya)[..4], &t.data(yb)[..4]);
    assert_ne!(&t.data(ya)[4..], &t.data(yb)[4..]);
}

#[test]
fn gc_rope() {
    let dims = AttnDims { batch: 2, seq: 3, heads: 2, d_model: 8 };
    let x = rand_tensor(&[6, 24], 33);
    let err = grad_check(|t, v| { let y = t.rope(v, dims)?; probe(t, y, 34) }, &x, EPS).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gc_scatter_rows() {
    let x = rand_tensor(&[3, 2], 40);
    let other = rand_tensor(&[2, 2], 41);
    let err = grad_check(
        |t, v| {
            let o = t.constant(other.clone())?;
            let y = t.scatter_rows(vec![(v, vec![0, 3, 1]), (o, vec![3, 2])], 4, 2)?;
            probe(t, y, 42)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gc_mul_rows_both_inputs() {
    let x = rand_tensor(&[3, 4], 50);
    let g = rand_tensor(&[3, 1], 51);
    let e1 = grad_check(|t, v| { let gv = t.constant(g.clone())?; let y = t.mul_rows(v, gv)?; probe(t, y, 52) }, &x, EPS).unwrap();
    let e2 = grad_check(|t, v| { let xv = t.constant(x.clone())?; let y = t.mul_rows(xv, v)?; probe(t, y, 52) }, &g, EPS).unwrap();
    assert!(e1 < TOL && e2 < TOL, "{e1} {e2}");
}

#[test]
fn gc_div_scalar_both_inputs() {
    let x = rand_tensor(&[2, 3], 60);
    let s = Tensor::from_f64([1], &[0.37]).unwrap();
    let e1 = grad_check(|t, v| { let sv = t.constant(s.clone())?; let y = t.div_scalar(v, sv)?; probe(t, y, 61) }, &x, EPS).unwrap();
    let e2 = grad_check(|t, v| { let xv = t.constant(x.clone())?; let y = t.div_scalar(xv, v)?; probe(t, y, 61) }, &s, EPS).unwrap();
    assert!(e1 < TOL && e2 < TOL, "{e1} {e2}");
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_rows_are_simplex(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut t = Tape::<f64>::inference();
            let x = t.constant(Tensor::new([3, 4], vals).unwrap()).unwrap();
            let s = t.softmax(x).unwrap();
            for row in t.data(s).chunks(4) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn gelu_matches_tanh_form() {
    let xs = [-6.0, -1.3, -0.2, 0.0, 0.4, 1.0, 3.7, 12.0];
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::from_f64([8], &xs).unwrap()).unwrap();
    let y = tape.gelu(x).unwrap();
    for (&v, &got) in xs.iter().zip(tape.data(y)) {
        let u = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v);
        let want = 0.5 * v * (1.0 + u.tanh());
        assert!((got - want).abs() < 1e-14, "{v}: {got} vs {want}");
    }
}
