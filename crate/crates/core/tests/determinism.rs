//! Repeated runs with one config and seed must produce identical bytes.

use std::fs;

use moe_lab::cli::{self, RunConfig};
use moe_lab::model::{Checkpoint, ModelConfig};
use moe_lab::router::RoutingStrategy;
use moe_lab::trainer::{synthetic_text, Corpus, TrainConfig, Trainer};

fn small_model() -> ModelConfig {
    ModelConfig { n_layers: 4, n_experts: 4, top_k: 2, d_model: 32, n_heads: 2, d_ffn: 32, seq_len: 16, strategy: RoutingStrategy::path_shared(2), alpha: 0.01, ..ModelConfig::default() }
}

fn small_run(out: &std::path::Path) -> RunConfig {
    RunConfig {
        model: small_model(),
        train: TrainConfig { steps: 12, batch_size: 4, warmup: 3, eval_rows: 4, ..TrainConfig::default() },
        seed: 11,
        synthetic_corpus_bytes: Some(30_000),
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn metrics_traces_and_checkpoints_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let probe = dir.path().join("probe.txt");
    fs::write(&probe, synthetic_text(1500, 8)).unwrap();
    let tokens = cli::read_tokens(&probe).unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = small_run(&dir.path().join(name));
        cli::cmd_train(&run, None).unwrap();
        let trace = dir.path().join(format!("{name}.jsonl"));
        cli::cmd_trace(&run.out.join("checkpoint.pmlb"), &tokens, 8, &trace).unwrap();
        outputs.push([
            fs::read(run.out.join("metrics.csv")).unwrap(),
            fs::read(&trace).unwrap(),
            fs::read(run.out.join("checkpoint.pmlb")).unwrap(),
            fs::read(run.out.join("summary.json")).unwrap(),
        ]);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let corpus = Corpus::from_bytes(synthetic_text(30_000, 3).as_bytes()).unwrap();
    let train = TrainConfig { steps: 10, batch_size: 4, warmup: 3, ..TrainConfig::default() };
    let mut straight = Trainer::new(small_model(), train.clone(), 4).unwrap();
    let mut losses = Vec::new();
    while !straight.is_done() {
        losses.push(straight.step(&corpus).unwrap().ce);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.pmlb");
    let mut first = Trainer::new(small_model(), train, 4).unwrap();
    let mut resumed_losses = Vec::new();
    for _ in 0..6 {
        resumed_losses.push(first.step(&corpus).unwrap().ce);
    }
    first.to_checkpoint().save(&path).unwrap();
    drop(first);
    let mut second = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    while !second.is_done() {
        resumed_losses.push(second.step(&corpus).unwrap().ce);
    }
    assert_eq!(losses, resumed_losses);
    let a = straight.to_checkpoint();
    let b = second.to_checkpoint();
    assert_eq!(a.arrays, b.arrays);
}

#[test]
fn cli_resume_from_periodic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = small_run(&dir.path().join("full"));
    run.train.checkpoint_every = 5;
    let full = cli::cmd_train(&run, None).unwrap();

    let from = run.out.join("step-000005.pmlb");
    run.out = dir.path().join("resumed");
    let resumed = cli::cmd_train(&run, Some(&from)).unwrap();
    assert_eq!(full.final_ce, resumed.final_ce);
    assert_eq!(full.eval_ppl, resumed.eval_ppl);
    assert_eq!(fs::read(dir.path().join("full/checkpoint.pmlb")).unwrap(), fs::read(dir.path().join("resumed/checkpoint.pmlb")).unwrap());
}
