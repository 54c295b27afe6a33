//! Baseline against SGE on the synthetic pattern task.
//!
//! `cargo run --release --example train_toy -- <seed> <epochs>`

use sge::experiment::{run_toy, Attention, ToyConfig, TOY_EPOCHS};
use sge::nn::Split;

fn main() -> sge::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(TOY_EPOCHS);
    for attention in [Attention::None, Attention::Sge] {
        let cfg = ToyConfig::new(attention, seed).with_epochs(epochs);
        let run = run_toy(&cfg)?;
        let curve: Vec<String> = run
            .report
            .history
            .iter()
            .filter(|m| m.split == Split::Test)
            .map(|m| format!("{:.3}", m.accuracy))
            .collect();
        println!("{attention:>4}: test accuracy by epoch {}", curve.join(" "));
        for layer in run.model().sge_layers() {
            let p = run.model().sge_params(layer)?;
            println!("      gamma {:?}", p.gamma);
            println!("      beta  {:?}", p.beta);
        }
    }
    Ok(())
}
