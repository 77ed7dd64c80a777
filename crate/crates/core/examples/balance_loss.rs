//! Load-balancing term on hand-built routing decisions: a perfectly
//! balanced batch costs `alpha`, a collapsed one `alpha * N`.

use moe_lab::router::{layer_balance_loss, top_k_select};

fn main() -> moe_lab::Result<()> {
    let (n, alpha) = (16, 0.01);
    let balanced: Vec<_> = (0..n)
        .map(|t| {
            let probs: Vec<f64> = (0..n).map(|e| if e == t { 1.0 } else { 0.0 }).collect();
            top_k_select(&probs, 1, 0)
        })
        .collect::<Result<_, _>>()?;
    let collapsed: Vec<_> = (0..n)
        .map(|_| {
            let probs: Vec<f64> = (0..n).map(|e| if e == 0 { 1.0 } else { 0.0 }).collect();
            top_k_select(&probs, 1, 0)
        })
        .collect::<Result<_, _>>()?;
    println!("N = {n}, alpha = {alpha}");
    println!("balanced  {:.6}", layer_balance_loss(&balanced, alpha)?);
    println!("collapsed {:.6}", layer_balance_loss(&collapsed, alpha)?);
    Ok(())
}
