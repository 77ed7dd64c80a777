//! Finds a model's most frequent routing paths early in training, then
//! continues with top-1 routing confined to them.

use moe_lab::model::{ForwardOptions, ModelConfig};
use moe_lab::router::RoutingStrategy;
use moe_lab::trainer::{identify_top_paths, restrict_to_paths, synthetic_text, Corpus, TrainConfig, Trainer};

fn main() -> moe_lab::Result<()> {
    let corpus = Corpus::from_bytes(synthetic_text(100_000, 4).as_bytes())?;
    let cfg = ModelConfig { n_layers: 4, n_experts: 4, d_model: 64, n_heads: 4, d_ffn: 64, strategy: RoutingStrategy::path_shared(2), alpha: 0.01, ..ModelConfig::default() };
    let train = TrainConfig { steps: 40, batch_size: 8, warmup: 10, ..TrainConfig::default() };
    let mut early = Trainer::new(cfg, train, 5)?;
    while !early.is_done() {
        early.step(&corpus)?;
    }
    let checkpoint = early.to_checkpoint();
    let eval = &corpus.eval[..4096];

    for k in [1, 5, 20, 0] {
        let mut t = Trainer::from_checkpoint(checkpoint.clone())?;
        t.config.steps = 200;
        if k > 0 {
            let top = identify_top_paths(&t.model, eval, 16, k)?;
            println!("K={k}: kept {} of {} observed paths, covering {:.1}% of tokens", top.paths.len(), top.observed, 100.0 * top.coverage);
            restrict_to_paths(&mut t, top.trie)?;
        }
        let mut compliance: f64 = 1.0;
        while !t.is_done() {
            compliance = compliance.min(t.step(&corpus)?.compliance.unwrap_or(1.0));
        }
        let ev = t.model.evaluate(eval, 16, ForwardOptions { restrict: t.restrict.as_ref(), dispatch: None })?;
        let label = if k > 0 { format!("K={k}") } else { "unrestricted".into() };
        println!("{label:<13} eval ppl {:.3}, min compliance {compliance:.3}", ev.ppl);
    }
    Ok(())
}
