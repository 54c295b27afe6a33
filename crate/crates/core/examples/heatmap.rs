//! Writes pre/post SGE activation maps of one test image as PGM files.
//!
//! `cargo run --release --example heatmap -- <out_dir>`

use sge::experiment::{run_toy, Attention, ToyConfig};
use sge::io::write_heatmap;
use sge::stats::{activation_lengths, normalize_unit_interval};
use sge::group_split;

fn main() -> sge::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "heatmaps".into());
    std::fs::create_dir_all(&out)?;
    let mut cfg = ToyConfig::new(Attention::Sge, 0).with_epochs(4);
    cfg.train_size = 1000;
    cfg.test_size = 10;
    let run = run_toy(&cfg)?;
    let (_, test) = cfg.datasets()?;
    let model = run.model();
    let layer = model.sge_layers()[0];
    let groups = model.sge_params(layer)?.groups;

    let (pre, post) = model.probe(&test.images.select(&[0]), layer)?;
    let (h, w) = (pre.shape().h, pre.shape().w);
    for (phase, fm) in [("pre", &pre), ("post", &post)] {
        let view = group_split(fm, groups)?;
        for g in 0..groups {
            let values = normalize_unit_interval(&activation_lengths(&view, 0, g)?);
            write_heatmap(&values, w, h, 16, format!("{out}/group{g}_{phase}.pgm"))?;
        }
    }
    println!("label {}; wrote {} maps of {w}x{h} to {out}/", test.labels[0], 2 * groups);
    Ok(())
}
