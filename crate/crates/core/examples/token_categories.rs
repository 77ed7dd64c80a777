//! Classifies the words behind each routing path into lexical and
//! morphological categories.

use moe_lab::analysis::{category_summary, mean_concentration, path_token_report, record_trace, Categories, PathHistogram};
use moe_lab::model::{ForwardOptions, ModelConfig};
use moe_lab::trainer::{synthetic_text, Corpus, TrainConfig, Trainer};

fn main() -> moe_lab::Result<()> {
    let cats = Categories::bundled();
    for w in ["said", "However", "Tuesday", "player", "decisions", "21st", "1,200", "zebra"] {
        println!("{w:>10} -> {}", cats.categorize(w));
    }

    let corpus = Corpus::from_bytes(synthetic_text(100_000, 5).as_bytes())?;
    let cfg = ModelConfig { n_layers: 4, n_experts: 4, d_model: 64, n_heads: 4, d_ffn: 64, alpha: 0.01, ..ModelConfig::default() };
    let mut trainer = Trainer::new(cfg, TrainConfig { steps: 150, batch_size: 8, warmup: 10, ..TrainConfig::default() }, 9)?;
    while !trainer.is_done() {
        trainer.step(&corpus)?;
    }
    let trace = record_trace(&trainer.model, &corpus.eval[..4096], 16, ForwardOptions::default())?;
    let hist = PathHistogram::from_trace(&trace);
    let report = path_token_report(&trace, &hist, &cats, 5, 6);
    for r in &report {
        let tokens: Vec<String> = r.top_tokens.iter().map(|(t, c)| format!("{t:?}x{c}")).collect();
        println!("#{} {:?} {:.1}% {} ({:.0}%) {}", r.rank, r.path, 100.0 * r.freq, r.modal_category, 100.0 * r.concentration, tokens.join(" "));
    }
    println!("mean concentration {:.3}", mean_concentration(&report));
    for row in category_summary(&trace, &cats).iter().take(8) {
        println!("{:<18} {:>5} tokens, {:.0}% on {:?}", row.category, row.count, 100.0 * row.top_path_share, row.top_path);
    }
    Ok(())
}
