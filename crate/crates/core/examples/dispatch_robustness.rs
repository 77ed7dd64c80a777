//! Scrambles expert dispatch at random layers of a briefly trained model
//! and reports the perplexity change for several probabilities.

use moe_lab::analysis::perturb_and_eval;
use moe_lab::model::ModelConfig;
use moe_lab::router::RoutingStrategy;
use moe_lab::trainer::{synthetic_text, Corpus, TrainConfig, Trainer};

fn main() -> moe_lab::Result<()> {
    let corpus = Corpus::from_bytes(synthetic_text(100_000, 3).as_bytes())?;
    for strategy in [RoutingStrategy::independent(), RoutingStrategy::path_shared(2)] {
        let cfg = ModelConfig { n_layers: 4, n_experts: 4, d_model: 64, n_heads: 4, d_ffn: 64, strategy, alpha: 0.01, ..ModelConfig::default() };
        let mut trainer = Trainer::new(cfg, TrainConfig { steps: 200, batch_size: 8, warmup: 10, ..TrainConfig::default() }, 1)?;
        while !trainer.is_done() {
            trainer.step(&corpus)?;
        }
        let eval = &corpus.eval[..4096];
        for p in [0.0, 0.25, 1.0] {
            let runs = (0..3).map(|seed| perturb_and_eval(&trainer.model, p, eval, 16, seed)).collect::<moe_lab::Result<Vec<_>>>()?;
            let mean = runs.iter().map(|r| r.delta_pct).sum::<f64>() / runs.len() as f64;
            println!("{:<8} p={p:<4} base ppl {:.3}  mean dPPL {mean:+.1}%", trainer.model.config().strategy.label(), runs[0].base_ppl);
        }
    }
    Ok(())
}
