//! The train, trace and analyze commands driven from code, writing the same
//! files the `moe-lab` binary does.
//!
//! cargo run --release --example cli_pipeline -- [out_dir]

use std::path::PathBuf;

use moe_lab::cli::{self, AnalyzeArgs, RunConfig};
use moe_lab::model::ModelConfig;
use moe_lab::trainer::{synthetic_text, TrainConfig};

fn main() -> moe_lab::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("moe-lab-pipeline"), PathBuf::from);
    let run = RunConfig {
        model: ModelConfig { n_layers: 4, n_experts: 4, d_model: 64, n_heads: 4, d_ffn: 64, alpha: 0.01, ..ModelConfig::default() },
        train: TrainConfig { steps: 100, batch_size: 8, warmup: 10, ..TrainConfig::default() },
        seed: 1,
        synthetic_corpus_bytes: Some(100_000),
        out: out.join("run"),
        ..RunConfig::default()
    };
    let summary = cli::cmd_train(&run, None)?;
    println!("trained: {}", serde_json::to_string(&summary)?);

    let text = out.join("probe.txt");
    std::fs::write(&text, synthetic_text(3000, 99))?;
    let trace_path = out.join("trace.jsonl");
    let t = cli::cmd_trace(&run.out.join("checkpoint.pmlb"), &cli::read_tokens(&text)?, 16, &trace_path)?;
    println!("traced {} tokens over {} paths", t.tokens, t.unique_paths);

    let (trace, hash) = cli::load_trace(&trace_path)?;
    for metric in ["entropy", "mi", "consistency"] {
        print!("{}", cli::analyze(metric, &trace, &AnalyzeArgs::default())?.render(metric, &hash)?);
    }
    println!("outputs under {}", out.display());
    Ok(())
}
