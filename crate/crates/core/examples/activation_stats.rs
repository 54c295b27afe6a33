//! Trains a short SGE run, then compares activation statistics before and
//! after the SGE layer.

use sge::experiment::{run_toy, Attention, ToyConfig};
use sge::stats::{collect_activation_stats, Phase, DEFAULT_BINS};

fn main() -> sge::Result<()> {
    let mut cfg = ToyConfig::new(Attention::Sge, 0).with_epochs(4);
    cfg.train_size = 1000;
    cfg.test_size = 300;
    let run = run_toy(&cfg)?;
    let (_, test) = cfg.datasets()?;
    let layer = run.model().sge_layers()[0];
    let stats = collect_activation_stats(run.model(), &test, layer, 0, DEFAULT_BINS, "toy-seed0")?;

    println!("group  pre mean var   post mean var");
    let pre = stats.group_variance.iter().filter(|v| v.phase == Phase::Pre);
    let post = stats.group_variance.iter().filter(|v| v.phase == Phase::Post);
    for (a, b) in pre.zip(post) {
        println!("{:>5}  {:>12.5}   {:>12.5}", a.group, a.mean_variance, b.mean_variance);
    }
    let (up, total) = stats.variance_increases();
    println!("variance increased in {up}/{total} groups");
    println!("low-quartile mass shift (group 0): {:+.4}", stats.histogram.low_quartile_shift());
    Ok(())
}
