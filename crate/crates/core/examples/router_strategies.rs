//! Builds every router strategy for an 8-layer, 8-expert stack and shows
//! its parameter count and the top-2 experts it picks per layer for one
//! hidden state.

use moe_lab::router::{top_k_select, RouterBank, RoutingStrategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> moe_lab::Result<()> {
    let (layers, experts, d) = (8, 8, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let strategies = [
        RoutingStrategy::independent(),
        RoutingStrategy::path_shared(2),
        RoutingStrategy::path_shared(4),
        RoutingStrategy::mono_shared(4),
        RoutingStrategy::low_rank(4),
        RoutingStrategy::xmoe(16),
        RoutingStrategy::random_frozen(),
        RoutingStrategy::path_xmoe(4, 16),
    ];
    for s in strategies {
        let bank = RouterBank::<f32>::init(s.clone(), layers, experts, d, &mut ChaCha8Rng::seed_from_u64(1))?;
        let mut picks = Vec::new();
        for l in 0..layers {
            let probs = bank.route_probs(&x, l)?;
            picks.push(format!("{:?}", top_k_select(&probs, 2, l)?.topk_indices));
        }
        let total: usize = bank.params().entries().iter().map(|e| e.tensor.numel()).sum();
        println!("{:<14} W {:>5}  all {:>5}  {}", s.label(), bank.weight_count(), total, picks.join(" "));
    }
    Ok(())
}
