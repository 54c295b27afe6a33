use std::path::Path;
use std::process::{Command, Output};

use sge::experiment::{Attention, ToyConfig};
use sge::io::{read_csv, write_tensor};

fn sge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sge")).args(args).output().expect("run binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 6] = ["--epochs", "1", "--train-size", "64", "--test-size", "32"];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--seed", "3", "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    sge(&args)
}

#[test]
fn count_prints_two_params_per_group() {
    let o = sge(&["count", "--channels", "256", "--groups", "64", "--height", "14", "--width", "14"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("params=128"), "{out}");
    assert!(out.contains(&format!("flops={}", 196 * (3 * 4 + 5) * 64)), "{out}");
    assert!(out.starts_with("# command=count"));
}

#[test]
fn usage_errors_exit_two() {
    let o = sge(&["count", "--channels", "8", "--groups", "2", "--height", "2", "--width", "2", "--nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(sge(&["train", "--attention", "maybe", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn verification_suites_pass() {
    let o = sge(&["gradcheck", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("failures=0"));
    let o = sge(&["gradcheck", "--seeds", "1", "--shapes", "1x4x2x3:2"]);
    assert_eq!(o.status.code(), Some(0));
    let o = sge(&["oracle", "--instances", "20"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("failures=0"));
}

#[test]
fn training_is_reproducible_and_feeds_diagnostics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(train_into(a.path(), &["--attention", "sge", "--gamma-init", "0", "--beta-init", "1"]).status.code(), Some(0));
    assert_eq!(train_into(b.path(), &["--attention", "sge", "--gamma-init", "0", "--beta-init", "1"]).status.code(), Some(0));
    let csv_a = std::fs::read_to_string(a.path().join("train.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read_to_string(b.path().join("train.csv")).unwrap());
    assert!(csv_a.contains("# seed=3"));
    let (header, rows) = read_csv(a.path().join("train.csv")).unwrap();
    assert_eq!(header, ["epoch", "split", "loss", "accuracy"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(
        std::fs::read(a.path().join("model.ckpt")).unwrap(),
        std::fs::read(b.path().join("model.ckpt")).unwrap()
    );

    let ckpt = a.path().join("model.ckpt");
    let stats_dir = a.path().join("stats");
    let o = sge(&["stats", "--checkpoint", ckpt.to_str().unwrap(), "--out", stats_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(stats_dir.join("group_variance.csv")).unwrap();
    assert_eq!(header, ["group", "mean_variance", "std_variance", "phase"]);
    assert_eq!(rows.len(), 16);
    let (header, rows) = read_csv(stats_dir.join("histogram.csv")).unwrap();
    assert_eq!(header, ["bin_low", "bin_high", "count_pre", "count_post"]);
    let total: u64 = rows.iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    assert_eq!(total, 32 * 64);

    let cfg = ToyConfig::new(Attention::Sge, 3);
    let (_, test) = cfg.datasets().unwrap();
    let input = a.path().join("image.sget");
    write_tensor(&input, &sge::cli::image_from_dataset(&test, 0)).unwrap();
    let maps = a.path().join("maps");
    let o = sge(&[
        "heatmap", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(),
        "--group", "0", "--group", "3", "--out", maps.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["group0_pre.pgm", "group0_post.pgm", "group3_pre.pgm", "group3_post.pgm"] {
        let bytes = std::fs::read(maps.join(name)).unwrap();
        let header = b"P5\n128 128\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 128 * 128);
    }
    let o = sge(&[
        "heatmap", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(),
        "--group", "8", "--out", maps.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn baseline_checkpoint_has_no_sge_site() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_into(dir.path(), &["--attention", "none"]).status.code(), Some(0));
    let ckpt = dir.path().join("model.ckpt");
    let o = sge(&["stats", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_writes_rows_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--axis", "norm", "--seeds", "2", "--out", dir.path().to_str().unwrap()];
    args.extend(SMALL);
    let o = sge(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(dir.path().join("ablate_norm.csv")).unwrap();
    assert_eq!(header, ["setting", "seed", "test_accuracy", "test_loss"]);
    let seeds: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(seeds, ["0", "1", "0", "1", "mean", "std", "mean", "std"]);
    assert!(std::fs::read_to_string(dir.path().join("ablate_norm.csv")).unwrap().starts_with("# axis=norm"));
}
