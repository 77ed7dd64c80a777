//! Finite-difference check of every tape kernel and of a one-layer MoE
//! language-model loss, in double precision.

use moe_lab::gradsuite::{gradient_suite, GRAD_TOL};

fn main() -> moe_lab::Result<()> {
    let t0 = std::time::Instant::now();
    let rows = gradient_suite(1e-5)?;
    for r in &rows {
        println!("{:<40} {:.3e} {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} checks, worst {worst:.3e} (tolerance {GRAD_TOL:e}), {:.1?}", rows.len(), t0.elapsed());
    Ok(())
}
