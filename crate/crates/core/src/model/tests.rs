use super::*;
use crate::router::RoutingStrategy;
use crate::trainer::PathTrie;

fn tiny(l: usize) -> ModelConfig {
    ModelConfig {
        n_layers: l,
        n_experts: 4,
        top_k: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 6,
        vocab_size: 11,
        seq_len: 5,
        ..ModelConfig::default()
    }
}

fn tokens() -> Vec<usize> {
    vec![1, 4, 2, 9, 0, 3, 3, 7, 10, 5]
}

fn logits_of(m: &Model<f64>, toks: &[usize], opts: ForwardOptions<'_>) -> (Vec<f64>, Vec<Vec<usize>>) {
    let mut tape = Tape::inference();
    let b = m.bind(&mut tape).unwrap();
    let f = m.forward(&mut tape, &b, toks, 2, 5, opts).unwrap();
    let paths = (0..toks.len()).map(|t| f.path(t)).collect();
    (tape.data(f.logits).to_vec(), paths)
}

/// `head(LN_f(embedding))` computed by hand.
fn embed_head_oracle(m: &Model<f64>, toks: &[usize], seq: usize) -> Vec<f64> {
    let c = m.config();
    let d = c.d_model;
    let emb = m.body().get("tok_emb").unwrap().data();
    let pos = m.body().get("pos_emb").map(|t| t.data());
    let head = m.body().get("head").unwrap().data();
    let mut out = Vec::new();
    for (i, &t) in toks.iter().enumerate() {
        let mut x: Vec<f64> = emb[t * d..(t + 1) * d].to_vec();
        if let Some(p) = pos {
            let s = i % seq;
            for j in 0..d {
                x[j] += p[s * d + j];
            }
        }
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let xh: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        for v in 0..c.vocab_size {
            out.push((0..d).map(|j| head[v * d + j] * xh[j]).sum());
        }
    }
    out
}

#[test]
fn zero_layer_model_is_embedding_then_head() {
    let m = Model::<f64>::init(tiny(0), 3).unwrap();
    let (got, _) = logits_of(&m, &tokens(), ForwardOptions::default());
    let want = embed_head_oracle(&m, &tokens(), 5);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn silent_sublayers_leave_the_residual_stream() {
    let mut m = Model::<f64>::init(tiny(3), 3).unwrap();
    for e in m.body_mut().entries_mut() {
        if e.name.ends_with("attn.wo") || e.name.ends_with(".w2") {
            e.tensor = Tensor::zeros(e.tensor.shape().to_vec());
        }
    }
    let (got, _) = logits_of(&m, &tokens(), ForwardOptions::default());
    let want = embed_head_oracle(&m, &tokens(), 5);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn forward_is_deterministic_and_traces_every_layer() {
    let m = Model::<f32>::init(tiny(3), 9).unwrap();
    let run = || {
        let mut tape = Tape::inference();
        let b = m.bind(&mut tape).unwrap();
        let f = m.forward(&mut tape, &b, &tokens(), 2, 5, ForwardOptions::default()).unwrap();
        let trace: Vec<_> = (0..3).flat_map(|l| f.decisions(&tape, l, false)).collect();
        (tape.data(f.logits).to_vec(), trace)
    };
    let (l1, t1) = run();
    let (l2, t2) = run();
    assert_eq!(l1, l2);
    assert_eq!(t1, t2);
    assert_eq!(t1.len(), 10 * 3);
    assert_eq!(l1.len(), 10 * 11);
}

#[test]
fn bad_tokens_rejected() {
    let m = Model::<f32>::init(tiny(1), 0).unwrap();
    let mut tape = Tape::inference();
    let b = m.bind(&mut tape).unwrap();
    let mut t = tokens();
    t[3] = 11;
    assert!(m.forward(&mut tape, &b, &t, 2, 5, ForwardOptions::default()).is_err());
}

#[test]
fn alpha_zero_total_is_cross_entropy() {
    let m = Model::<f64>::init(tiny(2), 1).unwrap();
    let mut tape = Tape::new();
    let b = m.bind(&mut tape).unwrap();
    let f = m.forward(&mut tape, &b, &tokens(), 2, 5, ForwardOptions::default()).unwrap();
    let loss = m.loss(&mut tape, &f, &tokens()).unwrap();
    assert!(loss.aux.is_none());
    assert_eq!(tape.data(loss.total), tape.data(loss.ce));
}

#[test]
fn uniform_routing_aux_closed_form() {
    let cfg = ModelConfig { n_layers: 24, n_experts: 16, alpha: 0.01, ..tiny(24) };
    let mut m = Model::<f64>::init(cfg, 1).unwrap();
    for e in m.router_mut().params_mut().entries_mut() {
        e.tensor = Tensor::zeros(e.tensor.shape().to_vec());
    }
    let mut tape = Tape::new();
    let b = m.bind(&mut tape).unwrap();
    let f = m.forward(&mut tape, &b, &tokens(), 2, 5, ForwardOptions::default()).unwrap();
    let loss = m.loss(&mut tape, &f, &tokens()).unwrap();
    let aux = tape.data(loss.aux.unwrap())[0];
    assert!((aux - 0.24).abs() < 1e-12, "{aux}");
}

#[test]
fn fresh_model_predicts_near_uniform() {
    let cfg = ModelConfig { vocab_size: 256, ..tiny(2) };
    let m = Model::<f64>::init(cfg, 5).unwrap();
    let toks: Vec<usize> = (0..10).map(|i| i * 23 % 256).collect();
    let mut tape = Tape::inference();
    let b = m.bind(&mut tape).unwrap();
    let f = m.forward(&mut tape, &b, &toks, 2, 5, ForwardOptions::default()).unwrap();
    let ce = tape.cross_entropy(f.logits, &toks).unwrap();
    assert!((tape.data(ce)[0] - (256f64).ln()).abs() < 0.05);
}

#[test]
fn evaluate_reports_exp_of_mean_ce() {
    let m = Model::<f32>::init(tiny(1), 2).unwrap();
    let stream: Vec<usize> = (0..23).map(|i| (i * 7) % 11).collect();
    let e = m.evaluate(&stream, 2, ForwardOptions::default()).unwrap();
    assert_eq!(e.tokens, 20);
    assert!((e.ppl - e.ce.exp()).abs() < 1e-9);
    assert!(m.evaluate(&[3], 2, ForwardOptions::default()).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_logits() {
    let cfg = ModelConfig { strategy: RoutingStrategy::path_xmoe(2, 4), ..tiny(3) };
    let m = Model::<f32>::init(cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.save(&p).unwrap();
    let back = Model::<f32>::load(&p).unwrap();
    let run = |m: &Model<f32>| {
        let mut tape = Tape::inference();
        let b = m.bind(&mut tape).unwrap();
        let f = m.forward(&mut tape, &b, &tokens(), 2, 5, ForwardOptions::default()).unwrap();
        tape.data(f.logits).to_vec()
    };
    assert_eq!(run(&m), run(&back));
    assert_eq!(back.config(), m.config());
}

#[test]
fn checkpoint_rejects_wrong_version() {
    let m = Model::<f32>::init(tiny(1), 4).unwrap();
    let mut buf = Vec::new();
    m.to_checkpoint().write_to(&mut buf).unwrap();
    buf[4] = 9;
    assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    assert!(Checkpoint::read_from(&mut &b"PMLX"[..]).is_err());
}

#[test]
fn full_trie_matches_unrestricted() {
    let m = Model::<f64>::init(tiny(2), 6).unwrap();
    let trie = PathTrie::full(2, 4).unwrap();
    let free = logits_of(&m, &tokens(), ForwardOptions::default());
    let held = logits_of(&m, &tokens(), ForwardOptions { restrict: Some(&trie), dispatch: None });
    assert_eq!(free, held);
}

#[test]
fn restricted_paths_stay_in_trie() {
    let m = Model::<f64>::init(tiny(2), 6).unwrap();
    let trie = PathTrie::new(&[vec![1, 2], vec![1, 3]], 2, 4).unwrap();
    let (_, paths) = logits_of(&m, &tokens(), ForwardOptions { restrict: Some(&trie), dispatch: None });
    assert!(paths.iter().all(|p| trie.contains(p)));
    assert!(paths.iter().all(|p| p[0] == 1));
}

#[test]
fn identity_dispatch_changes_nothing() {
    let m = Model::<f64>::init(tiny(2), 6).unwrap();
    let id = vec![(0..4).collect::<Vec<_>>(); 2];
    let free = logits_of(&m, &tokens(), ForwardOptions::default());
    let same = logits_of(&m, &tokens(), ForwardOptions { restrict: None, dispatch: Some(&id) });
    assert_eq!(free, same);
    let swapped = vec![vec![1, 0, 3, 2]; 2];
    let moved = logits_of(&m, &tokens(), ForwardOptions { restrict: None, dispatch: Some(&swapped) });
    assert_ne!(free.0, moved.0);
}

#[test]
fn mono_blocks_reuse_decisions() {
    let cfg = ModelConfig { strategy: RoutingStrategy::mono_shared(2), ..tiny(4) };
    let m = Model::<f64>::init(cfg, 8).unwrap();
    let (_, paths) = logits_of(&m, &tokens(), ForwardOptions::default());
    for p in paths {
        assert_eq!(p[0], p[1]);
        assert_eq!(p[2], p[3]);
    }
}

#[test]
fn body_init_is_shared_across_strategies() {
    let a = Model::<f32>::init(tiny(2), 11).unwrap();
    let b = Model::<f32>::init(ModelConfig { strategy: RoutingStrategy::path_shared(2), ..tiny(2) }, 11).unwrap();
    for (x, y) in a.body().entries().iter().zip(b.body().entries()) {
        assert_eq!(x.tensor, y.tensor);
    }
}
