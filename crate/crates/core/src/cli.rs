//! Command-line front end. Exit codes: 0 success, 1 failed check or
//! runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::experiment::{mean_std, run_ablation, run_toy, AblationAxis, Attention, ToyConfig};
use crate::io::{read_tensor, write_csv, write_heatmap, Checkpoint};
use crate::nn::{GeneratorParams, Model, SyntheticDataset};
use crate::rng::Stream;
use crate::sge::{count_flops, count_params};
use crate::stats::{activation_lengths, collect_activation_stats, normalize_unit_interval, DEFAULT_BINS};
use crate::tensor::{group_split, FeatureMap, Shape};
use crate::verify::{gradcheck_suite, oracle_suite, GradCheckConfig, DEFAULT_GRADCHECK_SHAPES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Heatmap upscaling factor.
pub const HEATMAP_SCALE: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "sge", about = "Spatial group-wise enhance: checks, toy experiments and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of the SGE backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Comma-separated `NxCxHxW:G` entries.
        #[arg(long, value_parser = parse_shapes)]
        shapes: Option<ShapeList>,
    },
    /// Compares the forward pass with a scalar-loop transcription.
    Oracle {
        #[arg(long, default_value_t = 100)]
        instances: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains one toy model and writes `train.csv` and `model.ckpt`.
    Train {
        #[arg(long, value_enum, default_value_t = AttentionArg::Sge)]
        attention: AttentionArg,
        #[arg(long, default_value_t = 8)]
        groups: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        gamma_init: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        beta_init: f64,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        norm: Switch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scale: ScaleArgs,
    },
    /// Sweeps one SGE setting over several seeds.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        scale: ScaleArgs,
    },
    /// Activation-variance and histogram CSVs for a checkpoint.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// SGE layer index; defaults to the first SGE layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        group: usize,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Pre/post SGE activation maps of one input as PGM images.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor file holding one image of the model's input shape.
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "group", required = true)]
        groups: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Parameter and FLOP counts of one SGE layer.
    Count {
        #[arg(long)]
        channels: usize,
        #[arg(long)]
        groups: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

#[derive(Debug, Clone, Args)]
struct ScaleArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AttentionArg {
    None,
    Sge,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Groups,
    Init,
    Norm,
}

/// Parsed `--shapes` value.
#[derive(Debug, Clone, PartialEq)]
struct ShapeList(Vec<([usize; 4], usize)>);

fn parse_shapes(s: &str) -> std::result::Result<ShapeList, String> {
    s.split(',')
        .map(|entry| {
            let (dims, g) = entry
                .split_once(':')
                .ok_or_else(|| format!("`{entry}` is not NxCxHxW:G"))?;
            let dims: Vec<usize> = dims
                .split('x')
                .map(|d| d.trim().parse().map_err(|_| format!("bad dimension in `{entry}`")))
                .collect::<std::result::Result<_, _>>()?;
            let dims: [usize; 4] = dims.try_into().map_err(|_| format!("`{entry}` needs four dimensions"))?;
            let g = g.trim().parse().map_err(|_| format!("bad group count in `{entry}`"))?;
            Ok((dims, g))
        })
        .collect::<std::result::Result<_, String>>()
        .map(ShapeList)
}

impl ScaleArgs {
    fn apply(&self, mut cfg: ToyConfig) -> ToyConfig {
        if let Some(e) = self.epochs {
            cfg = cfg.with_epochs(e);
        }
        if let Some(n) = self.train_size {
            cfg.train_size = n;
        }
        if let Some(n) = self.test_size {
            cfg.test_size = n;
        }
        cfg
    }
}

fn print_config(pairs: &[(String, String)]) {
    for (k, v) in pairs {
        println!("# {k}={v}");
    }
}

fn kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if code == EXIT_OK {
                print!("{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::IndivisibleChannels { .. }
                | Error::InvalidShape(_)
                | Error::InvalidParams(_)
                | Error::ShapeIncompatible { .. }
                | Error::LayerNotFound(_)
                | Error::BadBinCount(_)
                | Error::IndexOutOfRange { .. } => EXIT_USAGE,
                _ => EXIT_FAILED,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gradcheck { seeds, shapes } => gradcheck(seeds, shapes),
        Command::Oracle { instances, seed } => oracle(instances, seed),
        Command::Train {
            attention,
            groups,
            gamma_init,
            beta_init,
            norm,
            seed,
            out,
            scale,
        } => {
            let attention = match attention {
                AttentionArg::None => Attention::None,
                AttentionArg::Sge => Attention::Sge,
            };
            let mut cfg = scale.apply(ToyConfig::new(attention, seed));
            cfg.groups = groups;
            cfg.gamma_init = gamma_init;
            cfg.beta_init = beta_init;
            cfg.normalize = matches!(norm, Switch::On);
            train(&cfg, &out)
        }
        Command::Ablate { axis, seeds, out, scale } => {
            let axis = match axis {
                AxisArg::Groups => AblationAxis::Groups,
                AxisArg::Init => AblationAxis::Init,
                AxisArg::Norm => AblationAxis::Norm,
            };
            ablate(axis, seeds, &scale.apply(ToyConfig::new(Attention::Sge, 0)), &out)
        }
        Command::Stats {
            checkpoint,
            out,
            layer,
            group,
            bins,
        } => stats(&checkpoint, &out, layer, group, bins),
        Command::Heatmap {
            checkpoint,
            input,
            groups,
            out,
            layer,
        } => heatmap(&checkpoint, &input, &groups, &out, layer),
        Command::Count {
            channels,
            groups,
            height,
            width,
            batch,
        } => count(channels, groups, height, width, batch),
    }
}

fn gradcheck(seeds: u64, shapes: Option<ShapeList>) -> Result<i32> {
    let shapes = shapes.map_or_else(|| DEFAULT_GRADCHECK_SHAPES.to_vec(), |s| s.0);
    let cfg = GradCheckConfig::default();
    let listed: Vec<String> = shapes
        .iter()
        .map(|(d, g)| format!("{}x{}x{}x{}:{}", d[0], d[1], d[2], d[3], g))
        .collect();
    print_config(&kv(&[
        ("command", "gradcheck".into()),
        ("seeds", format!("0..{seeds}")),
        ("shapes", listed.join(",")),
        ("step", cfg.step.to_string()),
        ("rel_tol", cfg.rel_tol.to_string()),
        ("abs_floor", cfg.abs_floor.to_string()),
    ]));
    let reports = gradcheck_suite(seeds, &shapes, &cfg)?;
    let mut failed = 0;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for r in &reports {
        checked += r.checked;
        worst = worst.max(r.max_rel_error);
        for m in &r.failures {
            failed += 1;
            eprintln!(
                "FAIL shape={} groups={} seed={} {}[{}] analytic={:e} numeric={:e} rel_error={:e}",
                r.shape, r.groups, r.seed, m.tensor, m.index, m.analytic, m.numeric, m.rel_error
            );
        }
    }
    println!("checked={checked} failures={failed} max_rel_error={worst:e}");
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILED })
}

fn oracle(instances: u64, seed: u64) -> Result<i32> {
    print_config(&kv(&[
        ("command", "oracle".into()),
        ("instances", instances.to_string()),
        ("seed", seed.to_string()),
    ]));
    let checks = oracle_suite(instances, seed)?;
    let bad: Vec<_> = checks.iter().enumerate().filter(|(_, c)| !c.passed()).collect();
    for (i, c) in &bad {
        eprintln!("FAIL instance={i} {c:?}");
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let hat_mean = checks.iter().map(|c| c.max_abs_hat_mean).fold(0.0, f64::max);
    let hat_std = checks.iter().map(|c| c.max_hat_std_error).fold(0.0, f64::max);
    println!(
        "instances={} failures={} max_rel_error={worst:e} max_abs_hat_mean={hat_mean:e} max_hat_std_error={hat_std:e}",
        checks.len(),
        bad.len()
    );
    Ok(if bad.is_empty() { EXIT_OK } else { EXIT_FAILED })
}

/// Checkpoint metadata: the resolved config plus what is needed to rebuild
/// its test set.
fn checkpoint_metadata(cfg: &ToyConfig) -> Result<BTreeMap<String, String>> {
    let mut meta: BTreeMap<String, String> = cfg.metadata().into_iter().collect();
    meta.insert(
        "data".into(),
        serde_json::to_string(&cfg.data).map_err(|e| Error::InvalidParams(e.to_string()))?,
    );
    Ok(meta)
}

fn train(cfg: &ToyConfig, out: &Path) -> Result<i32> {
    let meta = cfg.metadata();
    print_config(&meta);
    fs::create_dir_all(out)?;
    let run = run_toy(cfg)?;
    let rows: Vec<Vec<String>> = run
        .report
        .history
        .iter()
        .map(|m| vec![m.epoch.to_string(), m.split.to_string(), format!("{:.6}", m.loss), format!("{:.6}", m.accuracy)])
        .collect();
    write_csv(out.join("train.csv"), &meta, &["epoch", "split", "loss", "accuracy"], &rows)?;
    Checkpoint::from_model(run.model(), checkpoint_metadata(cfg)?).write(out.join("model.ckpt"))?;
    println!("test_accuracy={:.4}", run.test_accuracy);
    Ok(EXIT_OK)
}

fn ablate(axis: AblationAxis, seeds: u64, base: &ToyConfig, out: &Path) -> Result<i32> {
    let mut meta = base.metadata();
    meta.retain(|(k, _)| !matches!(k.as_str(), "seed" | "groups" | "gamma_init" | "beta_init" | "norm"));
    meta.insert(0, ("axis".into(), axis.to_string()));
    meta.insert(1, ("seeds".into(), format!("0..{seeds}")));
    print_config(&meta);
    fs::create_dir_all(out)?;
    let rows = run_ablation(axis, seeds, base)?;
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut settings: Vec<&str> = Vec::new();
    for r in &rows {
        println!("{} seed={} test_accuracy={:.4}", r.setting, r.seed, r.test_accuracy);
        table.push(vec![
            r.setting.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.test_accuracy),
            format!("{:.6}", r.test_loss),
        ]);
        if !settings.contains(&r.setting.as_str()) {
            settings.push(&r.setting);
        }
    }
    for s in settings {
        let acc: Vec<f64> = rows.iter().filter(|r| r.setting == s).map(|r| r.test_accuracy).collect();
        let loss: Vec<f64> = rows.iter().filter(|r| r.setting == s).map(|r| r.test_loss).collect();
        let (am, asd) = mean_std(&acc);
        let (lm, lsd) = mean_std(&loss);
        println!("{s} mean={am:.4} std={asd:.4}");
        table.push(vec![s.to_string(), "mean".into(), format!("{am:.6}"), format!("{lm:.6}")]);
        table.push(vec![s.to_string(), "std".into(), format!("{asd:.6}"), format!("{lsd:.6}")]);
    }
    let path = out.join(format!("ablate_{axis}.csv"));
    write_csv(&path, &meta, &["setting", "seed", "test_accuracy", "test_loss"], &table)?;
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model<f32>)> {
    let ckpt = Checkpoint::read(path)?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn resolve_layer(model: &Model<f32>, layer: Option<usize>) -> Result<usize> {
    match layer {
        Some(l) => model.sge_params(l).map(|_| l),
        None => model.sge_layers().first().copied().ok_or(Error::LayerNotFound(0)),
    }
}

/// Rebuilds the held-out set recorded in a checkpoint's metadata.
fn checkpoint_test_set(ckpt: &Checkpoint) -> Result<SyntheticDataset> {
    let malformed = |reason: &str| Error::MalformedCheckpoint {
        offset: 0,
        reason: reason.to_string(),
    };
    let data: GeneratorParams = serde_json::from_str(ckpt.metadata.get("data").ok_or_else(|| malformed("no data metadata"))?)
        .map_err(|e| malformed(&e.to_string()))?;
    let size: usize = ckpt
        .metadata
        .get("test_size")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("no test_size metadata"))?;
    SyntheticDataset::generate(&data, size, Stream::TestData)
}

fn stats(checkpoint: &Path, out: &Path, layer: Option<usize>, group: usize, bins: usize) -> Result<i32> {
    let (ckpt, model) = load_checkpoint(checkpoint)?;
    let layer = resolve_layer(&model, layer)?;
    let data = checkpoint_test_set(&ckpt)?;
    let id = checkpoint.display().to_string();
    let s = collect_activation_stats(&model, &data, layer, group, bins, &id)?;

    let mut meta: Vec<(String, String)> = ckpt.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    meta.extend(kv(&[
        ("command", "stats".into()),
        ("model", id),
        ("layer", layer.to_string()),
        ("samples", data.len().to_string()),
        ("dataset_seed", data.params.seed.to_string()),
        ("aggregation", s.metadata.aggregation.clone()),
        ("histogram_group", group.to_string()),
        ("bins", bins.to_string()),
    ]));
    print_config(&meta);
    fs::create_dir_all(out)?;
    let rows: Vec<Vec<String>> = s
        .group_variance
        .iter()
        .map(|v| vec![v.group.to_string(), format!("{:e}", v.mean_variance), format!("{:e}", v.std_variance), v.phase.to_string()])
        .collect();
    write_csv(out.join("group_variance.csv"), &meta, &["group", "mean_variance", "std_variance", "phase"], &rows)?;
    let h = &s.histogram;
    let rows: Vec<Vec<String>> = (0..h.bins())
        .map(|b| {
            let (lo, hi) = h.edges(b);
            vec![format!("{lo:e}"), format!("{hi:e}"), h.counts_pre[b].to_string(), h.counts_post[b].to_string()]
        })
        .collect();
    write_csv(out.join("histogram.csv"), &meta, &["bin_low", "bin_high", "count_pre", "count_post"], &rows)?;
    let (up, total) = s.variance_increases();
    println!("variance_increased_groups={up}/{total}");
    println!("low_quartile_mass_shift={:+.6}", h.low_quartile_shift());
    Ok(EXIT_OK)
}

fn heatmap(checkpoint: &Path, input: &Path, groups: &[usize], out: &Path, layer: Option<usize>) -> Result<i32> {
    let (ckpt, model) = load_checkpoint(checkpoint)?;
    let layer = resolve_layer(&model, layer)?;
    let image = read_tensor(input)?;
    let (c, h, w) = model.input_chw();
    let expected = Shape::new(1, c, h, w)?;
    if image.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.dims(),
            found: image.shape().dims(),
        });
    }
    let mut meta: Vec<(String, String)> = ckpt.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    meta.extend(kv(&[
        ("command", "heatmap".into()),
        ("input", input.display().to_string()),
        ("layer", layer.to_string()),
        ("groups", format!("{groups:?}")),
        ("scale", HEATMAP_SCALE.to_string()),
    ]));
    print_config(&meta);
    fs::create_dir_all(out)?;
    let (pre, post) = model.probe(&image, layer)?;
    let sge_groups = model.sge_params(layer)?.groups;
    let (vp, vq) = (group_split(&pre, sge_groups)?, group_split(&post, sge_groups)?);
    let s = pre.shape();
    let sidecar: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    fs::write(out.join("heatmap_config.txt"), sidecar.join("\n") + "\n")?;
    for &g in groups {
        for (phase, view) in [("pre", &vp), ("post", &vq)] {
            let values = normalize_unit_interval(&activation_lengths(view, 0, g)?);
            let path = out.join(format!("group{g}_{phase}.pgm"));
            write_heatmap(&values, s.w, s.h, HEATMAP_SCALE, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(EXIT_OK)
}

fn count(channels: usize, groups: usize, height: usize, width: usize, batch: usize) -> Result<i32> {
    print_config(&kv(&[
        ("command", "count".into()),
        ("channels", channels.to_string()),
        ("groups", groups.to_string()),
        ("height", height.to_string()),
        ("width", width.to_string()),
        ("batch", batch.to_string()),
    ]));
    let shape = Shape::new(batch, channels, height, width)?;
    if groups == 0 || channels % groups != 0 {
        return Err(Error::IndivisibleChannels { channels, groups });
    }
    println!("params={}", count_params(channels, groups));
    println!("flops={}", count_flops(shape.n, shape.c, shape.h, shape.w, groups));
    Ok(EXIT_OK)
}

/// One dataset image as a `(1, C, H, W)` map, the shape `heatmap` reads.
pub fn image_from_dataset(data: &SyntheticDataset, index: usize) -> FeatureMap<f32> {
    data.images.select(&[index])
}
