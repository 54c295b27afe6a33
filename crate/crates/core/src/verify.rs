//! Reference checks for the SGE operator.
//!
//! The scalar oracle below is a literal, loop-for-loop transcription of the
//! operator that indexes the feature map element by element. It shares no
//! code with the cell-sliced implementation in [`crate::sge`] and is what
//! the `oracle` command and the acceptance tests compare against. Gradients
//! are checked against central finite differences of the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::sge::{sge_backward, sge_forward, SgeParams};
use crate::tensor::{FeatureMap, Shape};

/// Everything the scalar oracle computes, indexed `[n][g][..]`.
#[derive(Debug, Clone)]
pub struct ScalarOracle {
    pub g_vec: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<Vec<f64>>>,
    pub mu_c: Vec<Vec<f64>>,
    pub sigma_c: Vec<Vec<f64>>,
    pub c_hat: Vec<Vec<Vec<f64>>>,
    pub gate: Vec<Vec<Vec<f64>>>,
    pub output: FeatureMap<f64>,
    /// Multiply-adds executed, counted as the loops run.
    pub multiply_adds: u64,
}

pub fn scalar_sge_forward(fm: &FeatureMap<f64>, params: &SgeParams<f64>) -> ScalarOracle {
    let s = fm.shape();
    let groups = params.groups;
    let dim = s.c / groups;
    let m = s.h * s.w;
    let mut ma = 0u64;
    let mut out = FeatureMap::zeros(s);
    let mut all_g = Vec::new();
    let mut all_c = Vec::new();
    let mut all_mu = Vec::new();
    let mut all_sigma = Vec::new();
    let mut all_hat = Vec::new();
    let mut all_gate = Vec::new();

    for n in 0..s.n {
        let (mut gs, mut cs, mut mus, mut sigmas, mut hats, mut gates) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        for grp in 0..groups {
            let x = |d: usize, i: usize| fm.get(n, grp * dim + d, i / s.w, i % s.w);

            let mut g = vec![0.0; dim];
            for (d, gd) in g.iter_mut().enumerate() {
                for i in 0..m {
                    *gd += x(d, i);
                    ma += 1;
                }
                *gd /= m as f64;
            }

            let mut c = vec![0.0; m];
            for (i, ci) in c.iter_mut().enumerate() {
                for (d, gd) in g.iter().enumerate() {
                    *ci += gd * x(d, i);
                    ma += 1;
                }
            }

            let mut mu = 0.0;
            for ci in &c {
                mu += ci;
                ma += 1;
            }
            mu /= m as f64;
            let mut var = 0.0;
            for ci in &c {
                var += (ci - mu) * (ci - mu);
                ma += 1;
            }
            var /= m as f64;
            let sigma = var.sqrt();

            let mut hat = vec![0.0; m];
            let mut gate = vec![0.0; m];
            for i in 0..m {
                hat[i] = if params.normalize {
                    (c[i] - mu) / (sigma + params.epsilon)
                } else {
                    c[i]
                };
                ma += 1;
                let a = params.gamma[grp] * hat[i] + params.beta[grp];
                ma += 1;
                gate[i] = 1.0 / (1.0 + (-a).exp());
                ma += 1;
                for d in 0..dim {
                    out.set(n, grp * dim + d, i / s.w, i % s.w, x(d, i) * gate[i]);
                    ma += 1;
                }
            }

            gs.push(g);
            cs.push(c);
            mus.push(mu);
            sigmas.push(sigma);
            hats.push(hat);
            gates.push(gate);
        }
        all_g.push(gs);
        all_c.push(cs);
        all_mu.push(mus);
        all_sigma.push(sigmas);
        all_hat.push(hats);
        all_gate.push(gates);
    }

    ScalarOracle {
        g_vec: all_g,
        c: all_c,
        mu_c: all_mu,
        sigma_c: all_sigma,
        c_hat: all_hat,
        gate: all_gate,
        output: out,
        multiply_adds: ma,
    }
}

/// A random operator instance: input, parameters and upstream gradient.
#[derive(Debug, Clone)]
pub struct Instance {
    pub input: FeatureMap<f64>,
    pub params: SgeParams<f64>,
    pub d_output: FeatureMap<f64>,
}

/// Standard-normal input and upstream gradient; `gamma` in `[-1.5, 1.5]`,
/// `beta` in `[-1, 1]`.
pub fn random_instance(shape: Shape, groups: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = FeatureMap::from_fn(shape, |_, _, _, _| rng.sample(StandardNormal));
    let d_output = FeatureMap::from_fn(shape, |_, _, _, _| rng.sample(StandardNormal));
    let mut params = SgeParams::new(groups, 0.0, 0.0);
    for v in params.gamma.iter_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    for v in params.beta.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    Instance {
        input,
        params,
        d_output,
    }
}

/// Thresholds for comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute differences below this always pass.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

impl GradCheckConfig {
    /// `|a - n| / max(|a|, |n|, abs_floor / rel_tol)`; below `rel_tol`
    /// exactly when the difference is within the relative tolerance or the
    /// absolute floor.
    pub fn error(&self, analytic: f64, numeric: f64) -> f64 {
        let scale = analytic
            .abs()
            .max(numeric.abs())
            .max(self.abs_floor / self.rel_tol);
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub shape: Shape,
    pub groups: usize,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn objective(input: &FeatureMap<f64>, params: &SgeParams<f64>, d_output: &FeatureMap<f64>) -> f64 {
    let (out, _) = sge_forward(input, params).expect("perturbed instance stays valid");
    out.as_slice()
        .iter()
        .zip(d_output.as_slice())
        .map(|(o, d)| o * d)
        .sum()
}

/// Central differences on every coordinate of input, `gamma` and `beta`.
pub fn check_sge_gradients(inst: &Instance, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, cache) = sge_forward(&inst.input, &inst.params)?;
    let grads = sge_backward(&cache, &inst.d_output, &inst.params)?;
    let h = config.step;

    let mut report = GradCheckReport {
        shape: inst.input.shape(),
        groups: inst.params.groups,
        seed: 0,
        checked: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    let mut record = |tensor: &'static str, index: usize, analytic: f64, numeric: f64| {
        let rel_error = config.error(analytic, numeric);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel_error);
        if !(rel_error < config.rel_tol) {
            report.failures.push(Mismatch {
                tensor,
                index,
                analytic,
                numeric,
                rel_error,
            });
        }
    };

    let mut x = inst.input.clone();
    for k in 0..x.as_slice().len() {
        let orig = x.as_slice()[k];
        x.as_mut_slice()[k] = orig + h;
        let plus = objective(&x, &inst.params, &inst.d_output);
        x.as_mut_slice()[k] = orig - h;
        let minus = objective(&x, &inst.params, &inst.d_output);
        x.as_mut_slice()[k] = orig;
        record("input", k, grads.d_input.as_slice()[k], (plus - minus) / (2.0 * h));
    }

    let mut params = inst.params.clone();
    for g in 0..params.groups {
        let orig = params.gamma[g];
        params.gamma[g] = orig + h;
        let plus = objective(&inst.input, &params, &inst.d_output);
        params.gamma[g] = orig - h;
        let minus = objective(&inst.input, &params, &inst.d_output);
        params.gamma[g] = orig;
        record("gamma", g, grads.d_gamma[g], (plus - minus) / (2.0 * h));

        let orig = params.beta[g];
        params.beta[g] = orig + h;
        let plus = objective(&inst.input, &params, &inst.d_output);
        params.beta[g] = orig - h;
        let minus = objective(&inst.input, &params, &inst.d_output);
        params.beta[g] = orig;
        record("beta", g, grads.d_beta[g], (plus - minus) / (2.0 * h));
    }
    Ok(report)
}

/// Shapes exercised by default: `(N, C, H, W)` with a group count.
pub const DEFAULT_GRADCHECK_SHAPES: [([usize; 4], usize); 3] =
    [([1, 2, 2, 2], 1), ([2, 8, 3, 3], 4), ([1, 64, 5, 5], 16)];

/// Runs the gradient check for seeds `0..seeds` on every shape.
pub fn gradcheck_suite(
    seeds: u64,
    shapes: &[([usize; 4], usize)],
    config: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for &(dims, groups) in shapes {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        for seed in 0..seeds {
            let inst = random_instance(shape, groups, seed);
            let mut report = check_sge_gradients(&inst, config)?;
            report.seed = seed;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Comparison of one random instance against the scalar oracle.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub shape: Shape,
    pub groups: usize,
    /// Worst relative difference over the output and every intermediate.
    pub max_rel_error: f64,
    /// Worst `|mean(c_hat)|` over cells.
    pub max_abs_hat_mean: f64,
    /// Worst `|std(c_hat) - sigma/(sigma + eps)|` over cells.
    pub max_hat_std_error: f64,
}

pub const ORACLE_REL_TOL: f64 = 1e-6;
pub const HAT_MOMENT_TOL: f64 = 1e-5;

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= ORACLE_REL_TOL
            && self.max_abs_hat_mean <= HAT_MOMENT_TOL
            && self.max_hat_std_error <= HAT_MOMENT_TOL
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1e-12)
    }
}

pub fn compare_with_oracle(inst: &Instance) -> Result<OracleCheck> {
    let (out, cache) = sge_forward(&inst.input, &inst.params)?;
    let oracle = scalar_sge_forward(&inst.input, &inst.params);
    let shape = inst.input.shape();
    let groups = inst.params.groups;
    let m = shape.positions();

    let mut worst = out
        .as_slice()
        .iter()
        .zip(oracle.output.as_slice())
        .map(|(a, b)| rel_diff(*a, *b))
        .fold(0.0, f64::max);
    let (mut hat_mean, mut hat_std) = (0.0f64, 0.0f64);
    for n in 0..shape.n {
        for g in 0..groups {
            let pairs = [
                (cache.g_of(n, g), &oracle.g_vec[n][g]),
                (cache.c_of(n, g), &oracle.c[n][g]),
                (cache.c_hat_of(n, g), &oracle.c_hat[n][g]),
                (cache.gate_of(n, g), &oracle.gate[n][g]),
            ];
            for (fast, slow) in pairs {
                for (a, b) in fast.iter().zip(slow.iter()) {
                    worst = worst.max(rel_diff(*a, *b));
                }
            }
            let (mu, sigma) = cache.moments_of(n, g);
            worst = worst
                .max(rel_diff(mu, oracle.mu_c[n][g]))
                .max(rel_diff(sigma, oracle.sigma_c[n][g]));

            if inst.params.normalize {
                let hat = &oracle.c_hat[n][g];
                let mean = hat.iter().sum::<f64>() / m as f64;
                let std = (hat.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / m as f64).sqrt();
                let s = oracle.sigma_c[n][g];
                hat_mean = hat_mean.max(mean.abs());
                hat_std = hat_std.max((std - s / (s + inst.params.epsilon)).abs());
            }
        }
    }
    Ok(OracleCheck {
        shape,
        groups,
        max_rel_error: worst,
        max_abs_hat_mean: hat_mean,
        max_hat_std_error: hat_std,
    })
}

/// Random shape with `N` in 1..=3, `G` in 1..=4, `C/G` in 1..=4 and
/// `H`, `W` in 1..=6.
pub fn random_oracle_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0AC1E);
    let n = rng.random_range(1..=3);
    let groups = rng.random_range(1..=4);
    let dim = rng.random_range(1..=4);
    let h = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let shape = Shape::new(n, groups * dim, h, w).expect("positive dims");
    random_instance(shape, groups, seed)
}

pub fn oracle_suite(instances: u64, seed: u64) -> Result<Vec<OracleCheck>> {
    (0..instances)
        .map(|k| compare_with_oracle(&random_oracle_instance(seed.wrapping_mul(1_000_003).wrapping_add(k))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sge::count_flops;

    #[test]
    fn degenerate_cell_gradients() {
        // Identical positions make sigma exactly 0. The sigma term is then
        // second order in the step, so differences agree once step << eps.
        let shape = Shape::new(1, 4, 2, 2).unwrap();
        let mut inst = random_instance(shape, 2, 3);
        inst.input = FeatureMap::from_fn(shape, |_, c, _, _| 0.3 + c as f64 * 0.2);
        inst.params = inst.params.clone().with_epsilon(0.1);
        let (_, cache) = sge_forward(&inst.input, &inst.params).unwrap();
        assert!(cache.moments_of(0, 0).1 < 1e-15);
        let cfg = GradCheckConfig {
            step: 1e-6,
            ..GradCheckConfig::default()
        };
        let report = check_sge_gradients(&inst, &cfg).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn oracle_matches_fixed_shape() {
        let inst = random_instance(Shape::new(2, 8, 3, 3).unwrap(), 4, 7);
        let check = compare_with_oracle(&inst).unwrap();
        assert!(check.passed(), "{check:?}");
    }

    #[test]
    fn instrumented_count_matches_formula() {
        let inst = random_instance(Shape::new(1, 4, 2, 2).unwrap(), 2, 0);
        let oracle = scalar_sge_forward(&inst.input, &inst.params);
        assert_eq!(oracle.multiply_adds, 88);
        assert_eq!(oracle.multiply_adds, count_flops(1, 4, 2, 2, 2));

        for (dims, g) in [([2, 12, 3, 5], 3), ([1, 64, 5, 5], 16), ([3, 6, 1, 1], 6)] {
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).unwrap();
            let inst = random_instance(shape, g, 1);
            let oracle = scalar_sge_forward(&inst.input, &inst.params);
            assert_eq!(oracle.multiply_adds, count_flops(dims[0], dims[1], dims[2], dims[3], g));
        }
    }

    #[test]
    fn gradcheck_single_shape() {
        let inst = random_instance(Shape::new(2, 8, 3, 3).unwrap(), 4, 3);
        let report = check_sge_gradients(&inst, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.checked, 2 * 8 * 9 + 8);
    }

    #[test]
    fn gradcheck_detects_a_wrong_gradient() {
        // A deliberately wrong analytic value must be flagged
        let config = GradCheckConfig::default();
        assert!(config.error(1.0, 1.001) > config.rel_tol);
        assert!(config.error(1e-9, 5e-8) < config.rel_tol);
        assert!(config.error(0.0, 2e-7) > config.rel_tol);
    }
}
