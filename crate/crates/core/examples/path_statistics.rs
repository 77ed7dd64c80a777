//! Trains a small model briefly, records its routing on held-out text and
//! prints the path statistics: entropy, Markov bound, adjacent mutual
//! information, coverage, windowed consistency and run lengths.
//!
//! cargo run --release --example path_statistics -- [indep|path] [steps]

use moe_lab::analysis::{self, align_experts, record_trace, PathHistogram};
use moe_lab::model::{ForwardOptions, ModelConfig};
use moe_lab::router::RoutingStrategy;
use moe_lab::trainer::{synthetic_text, Corpus, TrainConfig, Trainer};

fn main() -> moe_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let strategy = match args.next().as_deref() {
        Some("indep") => RoutingStrategy::independent(),
        _ => RoutingStrategy::path_shared(2),
    };
    let steps = args.next().map_or(200, |s| s.parse().expect("steps"));

    let corpus = Corpus::from_bytes(synthetic_text(100_000, 2).as_bytes())?;
    let cfg = ModelConfig { n_layers: 4, n_experts: 4, d_model: 64, n_heads: 4, d_ffn: 64, strategy, alpha: 0.01, ..ModelConfig::default() };
    let mut trainer = Trainer::new(cfg, TrainConfig { steps, batch_size: 8, warmup: 10, ..TrainConfig::default() }, 7)?;
    while !trainer.is_done() {
        trainer.step(&corpus)?;
    }

    let trace = record_trace(&trainer.model, &corpus.eval[..4096], 16, ForwardOptions::default())?;
    let hist = PathHistogram::from_trace(&trace);
    let h = hist.routing_entropy()?;
    println!("{} tokens, {} distinct paths", trace.len(), h.unique);
    println!("routing entropy {:.3} bits ({:.1} effective paths)", h.bits, h.effective);
    println!("markov bound    {:.3} bits, ceiling {:.3}", analysis::markov_entropy(&trace)?, 4.0 * 4f64.log2());
    for l in 1..trace.n_layers {
        println!("MI(layer {l}; layer {}) = {:.3} bits", l + 1, analysis::adjacent_mi(&trace, l)?);
    }
    for k in [1, 5, 20] {
        println!("top-{k:<3} paths cover {:.1}%", 100.0 * hist.cumulative_coverage(k)?);
    }
    let align = align_experts(&trace)?;
    println!("aligned adjacent top-1 agreement {:.3}", analysis::adjacent_agreement(&trace, &align)?);
    for w in 2..=trace.n_layers {
        println!("consistency w={w}: {:.3}", analysis::path_consistency(&trace, &align, w)?);
    }
    for x in 1..=trace.n_layers {
        println!("runs of at least {x} layers: {:.3}", analysis::sustained_engagement(&trace, &align, x)?);
    }
    Ok(())
}
