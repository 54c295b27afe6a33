//! Activation diagnostics around an SGE layer.
//!
//! The activation of a sub-feature is its Euclidean length `|x_i|`. Group
//! variance is computed per sample over the `m` positions, then summarized
//! by its mean and population standard deviation across samples.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Model, SyntheticDataset};
use crate::tensor::{group_split, GroupedView, Real};

/// `|x_i|` for every position of group `g` in sample `n`.
pub fn activation_lengths<T: Real>(view: &GroupedView<'_, T>, n: usize, g: usize) -> Result<Vec<f64>> {
    let cell = view.cell(n, g)?;
    let m = view.positions();
    let mut sq = vec![0.0f64; m];
    for plane in cell.chunks_exact(m) {
        for (s, v) in sq.iter_mut().zip(plane) {
            let v = v.as_f64();
            *s += v * v;
        }
    }
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// Linear map onto `[0, 1]`; a constant input maps to all zeros.
pub fn normalize_unit_interval(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|v| if *v == hi { 1.0 } else { ((v - lo) / span).clamp(0.0, 1.0) })
        .collect()
}

/// Whether statistics are taken at the SGE layer's input or output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupVariance {
    pub group: usize,
    pub mean_variance: f64,
    pub std_variance: f64,
    pub phase: Phase,
}

const PROBE_BATCH: usize = 256;

fn sge_groups<T: Real>(model: &Model<T>, layer: usize) -> Result<usize> {
    match model.layers().get(layer) {
        Some(Layer::Sge(p)) => Ok(p.groups),
        _ => Err(Error::LayerNotFound(layer)),
    }
}

/// Calls `f(sample_lengths_pre, sample_lengths_post)` with the per-group
/// activation lengths of every sample, in dataset order.
fn for_each_sample<T: Real>(
    model: &Model<T>,
    data: &SyntheticDataset,
    layer: usize,
    mut f: impl FnMut(&[Vec<f64>], &[Vec<f64>]),
) -> Result<()> {
    let groups = sge_groups(model, layer)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(PROBE_BATCH) {
        let (x, _) = data.batch::<T>(chunk);
        let (pre, post) = model.probe(&x, layer)?;
        let (vp, vq) = (group_split(&pre, groups)?, group_split(&post, groups)?);
        for n in 0..chunk.len() {
            let lp = (0..groups).map(|g| activation_lengths(&vp, n, g)).collect::<Result<Vec<_>>>()?;
            let lq = (0..groups).map(|g| activation_lengths(&vq, n, g)).collect::<Result<Vec<_>>>()?;
            f(&lp, &lq);
        }
    }
    Ok(())
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Variance of lengths divided by their mean, i.e. the squared coefficient
/// of variation; zero for an all-zero map.
fn relative_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if mean > 0.0 {
        population_variance(v) / (mean * mean)
    } else {
        0.0
    }
}

/// Per-group mean and spread of the per-sample activation-length variance.
pub fn group_variance_distribution<T: Real>(
    model: &Model<T>,
    data: &SyntheticDataset,
    layer: usize,
    phase: Phase,
) -> Result<Vec<GroupVariance>> {
    summarize_groups(model, data, layer, phase, population_variance)
}

/// Like [`group_variance_distribution`], but each sample's lengths are first
/// divided by their mean, so a uniform rescaling of the map has no effect.
pub fn relative_variance_distribution<T: Real>(
    model: &Model<T>,
    data: &SyntheticDataset,
    layer: usize,
    phase: Phase,
) -> Result<Vec<GroupVariance>> {
    summarize_groups(model, data, layer, phase, relative_variance)
}

fn summarize_groups<T: Real>(
    model: &Model<T>,
    data: &SyntheticDataset,
    layer: usize,
    phase: Phase,
    per_sample: fn(&[f64]) -> f64,
) -> Result<Vec<GroupVariance>> {
    let groups = sge_groups(model, layer)?;
    let mut per_group: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len()); groups];
    for_each_sample(model, data, layer, |pre, post| {
        let lengths = if phase == Phase::Pre { pre } else { post };
        for (acc, l) in per_group.iter_mut().zip(lengths) {
            acc.push(per_sample(l));
        }
    })?;
    Ok(per_group
        .iter()
        .enumerate()
        .map(|(group, vars)| {
            let n = vars.len() as f64;
            let mean = vars.iter().sum::<f64>() / n;
            let std = (vars.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            GroupVariance {
                group,
                mean_variance: mean,
                std_variance: std,
                phase,
            }
        })
        .collect())
}

/// Aligned pre/post histograms over the joint value range.
#[derive(Debug, Clone, PartialEq)]
pub struct PrePostHistogram {
    pub low: f64,
    pub high: f64,
    pub counts_pre: Vec<u64>,
    pub counts_post: Vec<u64>,
}

impl PrePostHistogram {
    /// Fixed-width bins over `[min, max]` of both samples; the top edge is
    /// closed. A zero-width range puts everything in bin 0.
    pub fn from_values(pre: &[f64], post: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::BadBinCount(bins));
        }
        let all = pre.iter().chain(post);
        let low = all.clone().cloned().fold(f64::INFINITY, f64::min);
        let high = all.cloned().fold(f64::NEG_INFINITY, f64::max);
        let (low, high) = if low.is_finite() { (low, high) } else { (0.0, 0.0) };
        let width = (high - low) / bins as f64;
        let bin = |v: f64| -> usize {
            if width > 0.0 {
                (((v - low) / width) as usize).min(bins - 1)
            } else {
                0
            }
        };
        let mut counts_pre = vec![0u64; bins];
        let mut counts_post = vec![0u64; bins];
        for &v in pre {
            counts_pre[bin(v)] += 1;
        }
        for &v in post {
            counts_post[bin(v)] += 1;
        }
        Ok(PrePostHistogram {
            low,
            high,
            counts_pre,
            counts_post,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts_pre.len()
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.high - self.low) / self.bins() as f64;
        (self.low + w * bin as f64, self.low + w * (bin + 1) as f64)
    }

    pub fn totals(&self) -> (u64, u64) {
        (self.counts_pre.iter().sum(), self.counts_post.iter().sum())
    }

    /// Post minus pre fraction of the mass in the lowest quarter of bins.
    pub fn low_quartile_shift(&self) -> f64 {
        let q = (self.bins() / 4).max(1);
        let frac = |c: &[u64]| {
            let total: u64 = c.iter().sum();
            if total == 0 {
                0.0
            } else {
                c[..q].iter().sum::<u64>() as f64 / total as f64
            }
        };
        frac(&self.counts_post) - frac(&self.counts_pre)
    }
}

pub const DEFAULT_BINS: usize = 64;

/// Histogram of the activation lengths of one group over every position
/// and sample, before and after the SGE layer.
pub fn activation_histogram<T: Real>(
    model: &Model<T>,
    data: &SyntheticDataset,
    layer: usize,
    group: usize,
    bins: usize,
) -> Result<PrePostHistogram> {
    if bins < 2 {
        return Err(Error::BadBinCount(bins));
    }
    let groups = sge_groups(model, layer)?;
    if group >= groups {
        return Err(Error::IndexOutOfRange {
            what: "group",
            index: group,
            bound: groups,
        });
    }
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    for_each_sample(model, data, layer, |p, q| {
        pre.extend_from_slice(&p[group]);
        post.extend_from_slice(&q[group]);
    })?;
    PrePostHistogram::from_values(&pre, &post, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsMetadata {
    pub model_id: String,
    pub layer: usize,
    pub dataset_seed: u64,
    pub samples: usize,
    pub aggregation: String,
}

/// Everything the `stats` command reports for one SGE site.
#[derive(Debug, Clone)]
pub struct ActivationStats {
    /// `[phase][sample][group][position]`, pre first.
    pub lengths: [Vec<Vec<Vec<f64>>>; 2],
    pub group_variance: Vec<GroupVariance>,
    pub histogram: PrePostHistogram,
    pub histogram_group: usize,
    pub metadata: StatsMetadata,
}

impl ActivationStats {
    /// Groups whose post-SGE mean variance exceeds the pre-SGE one.
    pub fn variance_increases(&self) -> (usize, usize) {
        let pre: Vec<_> = self.group_variance.iter().filter(|v| v.phase == Phase::Pre).collect();
        let post: Vec<_> = self.group_variance.iter().filter(|v| v.phase == Phase::Post).collect();
        let up = pre
            .iter()
            .zip(&post)
            .filter(|(a, b)| b.mean_variance > a.mean_variance)
            .count();
        (up, pre.len())
    }
}

pub fn collect_activation_stats<T: Real>(
    model: &Model<T>,
    data: &SyntheticDataset,
    layer: usize,
    group: usize,
    bins: usize,
    model_id: &str,
) -> Result<ActivationStats> {
    let mut lengths = [Vec::new(), Vec::new()];
    for_each_sample(model, data, layer, |p, q| {
        lengths[0].push(p.to_vec());
        lengths[1].push(q.to_vec());
    })?;
    let mut group_variance = group_variance_distribution(model, data, layer, Phase::Pre)?;
    group_variance.extend(group_variance_distribution(model, data, layer, Phase::Post)?);
    let histogram = activation_histogram(model, data, layer, group, bins)?;
    Ok(ActivationStats {
        lengths,
        group_variance,
        histogram,
        histogram_group: group,
        metadata: StatsMetadata {
            model_id: model_id.to_string(),
            layer,
            dataset_seed: data.params.seed,
            samples: data.len(),
            aggregation: "per-sample population variance of |x_i| over positions; mean and population std across samples"
                .to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, GeneratorParams, LayerSpec};
    use crate::tensor::FeatureMap;

    #[test]
    fn lengths_of_simple_vectors() {
        // position 0 is (3, 4), position 1 is zero
        let fm = FeatureMap::<f64>::from_dims([1, 2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let l = activation_lengths(&fm.group_split(1).unwrap(), 0, 0).unwrap();
        assert_eq!(l, vec![5.0, 0.0]);
    }

    #[test]
    fn normalization_conventions() {
        assert_eq!(normalize_unit_interval(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_unit_interval(&[7.0, 7.0, 7.0]), vec![0.0; 3]);
        let v = normalize_unit_interval(&[0.3, -2.0, 11.0, 4.0]);
        assert_eq!(v.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(v.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn histogram_edge_cases() {
        let h = PrePostHistogram::from_values(&[2.0; 5], &[2.0; 5], 8).unwrap();
        assert_eq!(h.counts_pre[0], 5);
        assert_eq!(h.counts_pre.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.totals(), (5, 5));
        assert!(matches!(
            PrePostHistogram::from_values(&[1.0], &[1.0], 1),
            Err(Error::BadBinCount(1))
        ));
        let h = PrePostHistogram::from_values(&[0.0, 1.0], &[0.0, 0.0], 4).unwrap();
        assert_eq!(h.counts_pre, vec![1, 0, 0, 1]);
        assert_eq!(h.low_quartile_shift(), 0.5);
    }

    fn tiny_model() -> Model<f32> {
        let specs = vec![
            LayerSpec::conv(1, 4, 3),
            LayerSpec::Relu,
            LayerSpec::sge(2),
            LayerSpec::GlobalAvgPool,
            LayerSpec::dense(4, 4),
            LayerSpec::SoftmaxXent,
        ];
        build_model(&specs, (1, 16, 16), 1).unwrap()
    }

    fn tiny_data(n: usize) -> SyntheticDataset {
        SyntheticDataset::generate(&GeneratorParams::default(), n, crate::rng::Stream::TestData).unwrap()
    }

    #[test]
    fn wrong_layer_is_reported() {
        let model = tiny_model();
        assert!(matches!(
            group_variance_distribution(&model, &tiny_data(2), 1, Phase::Pre),
            Err(Error::LayerNotFound(1))
        ));
        assert!(matches!(
            activation_histogram(&model, &tiny_data(2), 0, 0, 8),
            Err(Error::LayerNotFound(0))
        ));
    }

    #[test]
    fn constant_activations_have_zero_variance() {
        // Zero conv weights and a positive bias make every position equal
        let mut model = tiny_model();
        {
            let mut p = model.params_mut();
            p[0].iter_mut().for_each(|v| *v = 0.0);
            p[1].iter_mut().for_each(|v| *v = 0.5);
        }
        let vars = group_variance_distribution(&model, &tiny_data(3), 2, Phase::Pre).unwrap();
        assert!(vars.iter().all(|v| v.mean_variance < 1e-20 && v.std_variance < 1e-20));
    }

    #[test]
    fn single_sample_has_zero_spread() {
        let vars = group_variance_distribution(&tiny_model(), &tiny_data(1), 2, Phase::Post).unwrap();
        assert!(vars.iter().all(|v| v.std_variance == 0.0));
    }

    #[test]
    fn relative_variance_ignores_scale() {
        assert_eq!(relative_variance(&[0.0, 0.0]), 0.0);
        let a = relative_variance(&[1.0, 2.0, 4.0]);
        let b = relative_variance(&[3.0, 6.0, 12.0]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn histogram_conserves_counts() {
        let data = tiny_data(5);
        let h = activation_histogram(&tiny_model(), &data, 2, 0, 16).unwrap();
        assert_eq!(h.totals(), (5 * 256, 5 * 256));
    }

    #[test]
    fn variance_ignores_sample_order() {
        let model = tiny_model();
        let data = tiny_data(6);
        let shuffled = data.permuted(&[3, 1, 5, 0, 4, 2]);
        for phase in [Phase::Pre, Phase::Post] {
            let a = group_variance_distribution(&model, &data, 2, phase).unwrap();
            let b = group_variance_distribution(&model, &shuffled, 2, phase).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.mean_variance - y.mean_variance).abs() <= 1e-12 * x.mean_variance.max(1.0));
                assert!((x.std_variance - y.std_variance).abs() <= 1e-12 * x.std_variance.max(1.0));
            }
        }
    }
}
