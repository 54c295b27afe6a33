//! Finite-difference check of the backward pass on the default shapes.
//!
//! `cargo run --release --example gradcheck -- 20` runs 20 seeds per shape.

use sge::verify::{gradcheck_suite, GradCheckConfig, DEFAULT_GRADCHECK_SHAPES};

fn main() -> sge::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = GradCheckConfig::default();
    let reports = gradcheck_suite(seeds, &DEFAULT_GRADCHECK_SHAPES, &cfg)?;
    for r in &reports {
        println!(
            "shape {} G={} seed {:>2}: {} coords, max rel error {:.2e}{}",
            r.shape,
            r.groups,
            r.seed,
            r.checked,
            r.max_rel_error,
            if r.passed() { "" } else { "  FAILED" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{failed} of {} instances failed", reports.len());
    Ok(())
}
