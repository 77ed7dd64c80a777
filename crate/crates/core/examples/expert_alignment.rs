//! Expert labels are arbitrary per layer. This builds a trace whose layers
//! use the same experts under different names and shows alignment
//! recovering the relabelling.

use moe_lab::analysis::{adjacent_agreement, align_experts, hungarian, path_consistency, RoutingTrace};

fn main() -> moe_lab::Result<()> {
    let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
    println!("assignment for {cost:?}: {:?}", hungarian(&cost));

    // layer l sees expert e as (e + l) mod 4
    let n = 4;
    let choices: Vec<Vec<Vec<usize>>> = (0..200)
        .map(|t| {
            let (a, b) = (t % n, (t / n) % n);
            (0..3).map(|l| vec![(a + l) % n, (b + l) % n]).collect()
        })
        .filter(|c: &Vec<Vec<usize>>| c[0][0] != c[0][1])
        .collect();
    let trace = RoutingTrace::from_choices(n, &choices)?;
    let align = align_experts(&trace)?;
    println!("per-layer maps into layer-1 labels: {:?}", align.perms);
    println!("agreement {:.3}, consistency(w=3) {:.3}", adjacent_agreement(&trace, &align)?, path_consistency(&trace, &align, 3)?);
    Ok(())
}
