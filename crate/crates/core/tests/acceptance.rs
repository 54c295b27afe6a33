//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sge::experiment::{median, run_toy, Attention, ToyConfig, ToyRun};
use sge::io::{read_tensor, write_csv, write_tensor, Checkpoint, TensorFile};
use sge::nn::{build_model, LayerSpec};
use sge::sge::sigmoid;
use sge::stats::{activation_histogram, group_variance_distribution, relative_variance_distribution, Phase, DEFAULT_BINS};
use sge::verify::{gradcheck_suite, oracle_suite, random_instance, GradCheckConfig, DEFAULT_GRADCHECK_SHAPES, HAT_MOMENT_TOL, ORACLE_REL_TOL};
use sge::{count_params, sge_forward, Error, FeatureMap, SgeParams, Shape};

const SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("create acceptance output dir");
    dir
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let reports = gradcheck_suite(20, &DEFAULT_GRADCHECK_SHAPES, &cfg).expect("valid shapes");
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let coords: usize = reports.iter().map(|r| r.checked).sum();
    let failures: usize = reports.iter().map(|r| r.failures.len()).sum();
    for r in reports.iter().filter(|r| !r.passed()) {
        for m in &r.failures {
            println!("    {} G={} seed {} {}[{}] analytic {:e} numeric {:e}", r.shape, r.groups, r.seed, m.tensor, m.index, m.analytic, m.numeric);
        }
    }
    outcome(
        failures == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{} instances, {coords} coordinates, max rel error {worst:.2e} (< {:e}), {:.1}s",
            reports.len(),
            cfg.rel_tol,
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_and_moments() -> (Outcome, Outcome) {
    let start = Instant::now();
    let checks = oracle_suite(100, 0).expect("valid instances");
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let hat_mean = checks.iter().map(|c| c.max_abs_hat_mean).fold(0.0, f64::max);
    let hat_std = checks.iter().map(|c| c.max_hat_std_error).fold(0.0, f64::max);
    (
        outcome(
            worst <= ORACLE_REL_TOL && elapsed < Duration::from_secs(10),
            format!("100 instances, max rel error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
        ),
        outcome(
            hat_mean <= HAT_MOMENT_TOL && hat_std <= HAT_MOMENT_TOL,
            format!("max |mean c_hat| {hat_mean:.2e}, max |std c_hat - sigma/(sigma+eps)| {hat_std:.2e}"),
        ),
    )
}

fn structure() -> Outcome {
    let mut detail = String::new();
    let counts_ok = [(8, 1), (8, 8), (64, 4), (256, 64), (512, 64), (2048, 64), (96, 32)]
        .iter()
        .all(|&(c, g)| count_params(c, g) == 2 * g as u64);
    write!(detail, "count_params=2G {counts_ok}").unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut local_ok, mut batch_ok) = (true, true);
    for seed in 0..20 {
        let shape = Shape::new(3, 12, 4, 5).unwrap();
        let inst = random_instance(shape, 4, seed);
        let (y, _) = sge_forward(&inst.input, &inst.params).unwrap();

        let (n, c) = (rng.random_range(0..3), rng.random_range(0..12));
        let (h, w) = (rng.random_range(0..4), rng.random_range(0..5));
        let mut x = inst.input.clone();
        x.set(n, c, h, w, x.get(n, c, h, w) + 0.5);
        let (y2, _) = sge_forward(&x, &inst.params).unwrap();
        let g = c / 3;
        for nn in 0..3 {
            for cc in 0..12 {
                if nn == n && cc / 3 == g {
                    continue;
                }
                for hh in 0..4 {
                    for ww in 0..5 {
                        let (a, b) = (y.get(nn, cc, hh, ww), y2.get(nn, cc, hh, ww));
                        if a.to_bits() != b.to_bits() {
                            if nn == n {
                                local_ok = false;
                            } else {
                                batch_ok = false;
                            }
                        }
                    }
                }
            }
        }
        for nn in 0..3 {
            let (alone, _) = sge_forward(&inst.input.select(&[nn]), &inst.params).unwrap();
            let bits = |f: &FeatureMap<f64>| f.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            batch_ok &= bits(&alone) == bits(&y.select(&[nn]));
        }
    }
    write!(detail, ", group locality {local_ok}, batch independence {batch_ok} (20 perturbations)").unwrap();
    outcome(counts_ok && local_ok && batch_ok, detail)
}

fn zero_gamma() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut inst = random_instance(Shape::new(2, 8, 3, 4).unwrap(), 4, seed);
        inst.params.gamma.iter_mut().for_each(|g| *g = 0.0);
        let (y, _) = sge_forward(&inst.input, &inst.params).unwrap();
        let x32 = inst.input.cast::<f32>();
        let p32 = SgeParams::<f32> {
            gamma: vec![0.0; 4],
            beta: inst.params.beta.iter().map(|b| *b as f32).collect(),
            ..SgeParams::new(4, 0.0, 1.0)
        };
        let (y32, _) = sge_forward(&x32, &p32).unwrap();
        let s = y.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let g = c / 2;
                        let expect = inst.input.get(n, c, h, w) * sigmoid(inst.params.beta[g]);
                        let e32 = x32.get(n, c, h, w) as f64 * sigmoid(p32.beta[g] as f64);
                        for (got, want) in [(y.get(n, c, h, w), expect), (y32.get(n, c, h, w) as f64, e32)] {
                            if got != want {
                                worst = worst.max((got - want).abs() / want.abs());
                            }
                        }
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-6, format!("50 instances (f64 and f32), max rel deviation from x*sigmoid(beta) {worst:.2e}"))
}

fn runs(label: &str, make: impl Fn(u64) -> ToyConfig) -> (Vec<ToyRun>, Duration) {
    let start = Instant::now();
    let runs: Vec<ToyRun> = (0..SEEDS)
        .map(|seed| {
            let run = run_toy(&make(seed)).expect("toy run");
            println!("    {label:<12} seed {seed}: test accuracy {:.4}", run.test_accuracy);
            run
        })
        .collect();
    (runs, start.elapsed())
}

fn accuracies(runs: &[ToyRun]) -> Vec<f64> {
    runs.iter().map(|r| r.test_accuracy).collect()
}

fn variance_direction(run: &ToyRun) -> Outcome {
    let (_, test) = run.config.datasets().unwrap();
    let model = run.model();
    let layer = model.sge_layers()[0];
    let pre = group_variance_distribution(model, &test, layer, Phase::Pre).unwrap();
    let post = group_variance_distribution(model, &test, layer, Phase::Post).unwrap();
    let mut rows = Vec::new();
    let mut up = 0;
    for (a, b) in pre.iter().zip(&post) {
        up += usize::from(b.mean_variance > a.mean_variance);
        for v in [a, b] {
            rows.push(vec![
                v.group.to_string(),
                format!("{:e}", v.mean_variance),
                format!("{:e}", v.std_variance),
                v.phase.to_string(),
            ]);
        }
        println!(
            "    group {}: pre {:.5} (sd {:.5})  post {:.5} (sd {:.5})",
            a.group, a.mean_variance, a.std_variance, b.mean_variance, b.std_variance
        );
    }
    let path = out_dir().join("group_variance.csv");
    let mut meta = run.config.metadata();
    meta.push(("layer".into(), layer.to_string()));
    write_csv(&path, &meta, &["group", "mean_variance", "std_variance", "phase"], &rows).unwrap();
    // Diagnostics for the investigation: a scale-free version of the same
    // comparison, the learned gate parameters and the histogram shift
    let rel_pre = relative_variance_distribution(model, &test, layer, Phase::Pre).unwrap();
    let rel_post = relative_variance_distribution(model, &test, layer, Phase::Post).unwrap();
    let rel_up = rel_pre.iter().zip(&rel_post).filter(|(a, b)| b.mean_variance > a.mean_variance).count();
    let p = model.sge_params(layer).unwrap();
    let hist = activation_histogram(model, &test, layer, 0, DEFAULT_BINS).unwrap();
    println!("    relative (mean-normalized) variance increased in {rel_up}/{} groups", rel_pre.len());
    println!("    learned gamma {:.3?}", p.gamma);
    println!("    learned beta  {:.3?}", p.beta);
    println!("    group 0 low-quartile mass shift {:+.4}", hist.low_quartile_shift());
    let frac = up as f64 / pre.len() as f64;
    outcome(
        frac >= 0.6,
        format!("variance increased in {up}/{} groups ({:.0}%), seed {}; csv {}", pre.len(), 100.0 * frac, run.config.seed, path.display()),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng) -> TensorFile {
    let rank = rng.random_range(0..=4);
    let dims: Vec<u32> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
    let len = dims.iter().product::<u32>() as usize;
    let data = (0..len).map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)).collect();
    TensorFile::new(dims, data).unwrap()
}

fn random_checkpoint(rng: &mut ChaCha8Rng, seed: u64) -> Checkpoint {
    let c1 = 2 * rng.random_range(1..=4);
    let groups = [1, 2][rng.random_range(0..2)];
    let size = rng.random_range(4..=9);
    let mut specs = vec![LayerSpec::conv(1, c1, 3), LayerSpec::Relu];
    if rng.random_bool(0.5) {
        specs.push(LayerSpec::MaxPool { size: 2 });
    }
    specs.push(LayerSpec::Sge {
        groups,
        gamma_init: rng.random_range(-1.0..1.0),
        beta_init: rng.random_range(-1.0..1.0),
        normalize: rng.random_bool(0.5),
        epsilon: 1e-5,
    });
    specs.extend([LayerSpec::GlobalAvgPool, LayerSpec::dense(c1, 4), LayerSpec::SoftmaxXent]);
    let model = build_model::<f32>(&specs, (1, size, size), seed).unwrap();
    let meta = [("seed".to_string(), seed.to_string()), ("note".to_string(), format!("instance {seed}"))].into();
    Checkpoint::from_model(&model, meta)
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut tensors_ok, mut ckpt_ok, mut rejects_ok) = (true, true, true);
    let mut note = String::new();
    for i in 0..50u64 {
        let t = random_tensor(&mut rng);
        let bytes = t.encode();
        let back = TensorFile::decode(&bytes).unwrap();
        tensors_ok &= back.encode() == bytes;
        if t.dims.len() == 4 {
            let fm = t.to_feature_map().unwrap();
            let path = dir.path().join(format!("t{i}.sget"));
            write_tensor(&path, &fm).unwrap();
            let first = std::fs::read(&path).unwrap();
            write_tensor(&path, &read_tensor(&path).unwrap()).unwrap();
            tensors_ok &= std::fs::read(&path).unwrap() == first;
        }
        let cut = rng.random_range(0..bytes.len());
        let truncated_ok = match TensorFile::decode(&bytes[..cut]) {
            Err(Error::TruncatedHeader { offset }) => offset == cut,
            Err(Error::TruncatedPayload { offset, needed }) => offset == cut && needed > 0,
            other => {
                let _ = writeln!(note, "tensor cut at {cut}: {other:?}");
                false
            }
        };
        rejects_ok &= truncated_ok;

        let ckpt = random_checkpoint(&mut rng, i);
        let path = dir.path().join(format!("c{i}.sgec"));
        ckpt.write(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let reread = Checkpoint::read(&path).unwrap();
        reread.write(&path).unwrap();
        ckpt_ok &= std::fs::read(&path).unwrap() == first && reread == ckpt;
        let cut = rng.random_range(0..first.len());
        rejects_ok &= matches!(
            Checkpoint::decode(&first[..cut]),
            Err(Error::TruncatedHeader { .. } | Error::TruncatedPayload { .. } | Error::MalformedCheckpoint { .. })
        );
    }

    let bytes = random_tensor(&mut rng).encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    rejects_ok &= matches!(TensorFile::decode(&bad), Err(Error::BadMagic { offset: 0 }));
    let mut bad = bytes.clone();
    bad[4] = 9;
    rejects_ok &= matches!(TensorFile::decode(&bad), Err(Error::BadVersion { offset: 4, found: 9 }));
    let mut bad = bytes.clone();
    bad.push(0);
    rejects_ok &= matches!(TensorFile::decode(&bad), Err(Error::TrailingBytes { offset }) if offset == bytes.len());
    let ckpt = random_checkpoint(&mut rng, 99).encode().unwrap();
    let mut bad = ckpt.clone();
    bad[10] = b'#';
    rejects_ok &= matches!(Checkpoint::decode(&bad), Err(Error::MalformedCheckpoint { offset: 10, .. }));
    let mut bad = ckpt.clone();
    bad[5] = 1;
    rejects_ok &= matches!(Checkpoint::decode(&bad), Err(Error::BadVersion { offset: 4, .. }));
    if !note.is_empty() {
        print!("{note}");
    }
    outcome(
        tensors_ok && ckpt_ok && rejects_ok,
        format!("50 tensors byte-identical {tensors_ok}, 50 checkpoints byte-identical {ckpt_ok}, truncation/corruption rejected {rejects_ok}"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, o: Outcome, results: &mut Vec<(&str, Outcome)>| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("1 gradient check", gradient_check(), &mut results);
    let (oracle, moments) = oracle_and_moments();
    report("2 forward oracle", oracle, &mut results);
    report("3 normalization moments", moments, &mut results);
    report("4 structure", structure(), &mut results);
    report("5 gamma=0 equivalence", zero_gamma(), &mut results);
    report("9 format round trips", round_trips(), &mut results);

    println!("    toy runs: {SEEDS} seeds per arm");
    let (base, t_base) = runs("baseline", |s| ToyConfig::new(Attention::None, s));
    let (sge, t_sge) = runs("sge g0 b1", |s| ToyConfig::new(Attention::Sge, s));
    let (b, s) = (accuracies(&base), accuracies(&sge));
    let gap = median(&s) - median(&b);
    let total = t_base + t_sge;
    let per_seed: Vec<String> = b.iter().zip(&s).map(|(x, y)| format!("{:+.2}", 100.0 * (y - x))).collect();
    report(
        "6 toy improvement",
        outcome(
            gap >= 0.01 && total <= Duration::from_secs(30 * 60),
            format!(
                "median sge {:.4} vs baseline {:.4} ({:+.2} points), per-seed diffs [{}], {:.0}s",
                median(&s),
                median(&b),
                100.0 * gap,
                per_seed.join(", "),
                total.as_secs_f64()
            ),
        ),
        &mut results,
    );
    report("7 variance direction", variance_direction(&sge[0]), &mut results);

    let (g1, _) = runs("sge g1 b1", |seed| ToyConfig {
        gamma_init: 1.0,
        ..ToyConfig::new(Attention::Sge, seed)
    });
    let (off, _) = runs("sge norm off", |seed| ToyConfig {
        normalize: false,
        ..ToyConfig::new(Attention::Sge, seed)
    });
    let (g1, off) = (accuracies(&g1), accuracies(&off));
    let init_ok = median(&s) >= median(&g1);
    let norm_ok = median(&off) <= median(&s);
    report(
        "8 ablation directions",
        outcome(
            init_ok && norm_ok,
            format!(
                "init g0b1 median {:.4} >= g1b1 median {:.4}: {init_ok}; norm off median {:.4} <= on median {:.4}: {norm_ok}",
                median(&s),
                median(&g1),
                median(&off),
                median(&s)
            ),
        ),
        &mut results,
    );

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
