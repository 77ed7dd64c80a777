//! Trains a small path-shared MoE on generated text and reports held-out
//! perplexity.
//!
//! cargo run --release --example train_small -- [steps] [block_size]

use moe_lab::model::{ForwardOptions, ModelConfig};
use moe_lab::router::RoutingStrategy;
use moe_lab::trainer::{synthetic_text, Corpus, TrainConfig, Trainer};

fn main() -> moe_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(300, |s| s.parse().expect("steps"));
    let block = args.next().map_or(4, |s| s.parse().expect("block size"));

    let corpus = Corpus::from_bytes(synthetic_text(200_000, 1).as_bytes())?;
    let model = ModelConfig { strategy: RoutingStrategy::path_shared(block), alpha: 0.01, ..ModelConfig::default() };
    let train = TrainConfig { steps, batch_size: 8, warmup: steps / 30 + 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, train, 1)?;
    println!("{} parameters, strategy {}", trainer.model.n_params(), trainer.model.config().strategy.label());

    while !trainer.is_done() {
        let s = trainer.step(&corpus)?;
        if s.step % 50 == 0 {
            let worst = s.load_ratios().into_iter().fold(0.0, f64::max);
            println!("step {:>5}  lr {:.2e}  ce {:.3}  aux {:.4}  max load ratio {:.2}", s.step, s.lr, s.ce, s.aux, worst);
        }
    }
    let ev = trainer.model.evaluate(&corpus.eval[..16_384], 16, ForwardOptions::default())?;
    println!("eval ce {:.4}  ppl {:.3} over {} tokens", ev.ce, ev.ppl, ev.tokens);
    Ok(())
}
