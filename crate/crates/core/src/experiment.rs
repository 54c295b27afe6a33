//! Seeded toy experiments: a small CNN with an optional SGE layer after its
//! last convolution block, trained on synthetic localized-pattern data.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{build_model, train, GeneratorParams, LayerSpec, Model, Split, SyntheticDataset, TrainConfig, TrainReport};
use crate::rng::Stream;
use crate::sge::DEFAULT_EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    None,
    Sge,
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attention::None => "none",
            Attention::Sge => "sge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub attention: Attention,
    pub groups: usize,
    pub gamma_init: f64,
    pub beta_init: f64,
    pub normalize: bool,
    /// Channels of the first and second convolution.
    pub widths: (usize, usize),
    pub data: GeneratorParams,
    pub train_size: usize,
    pub test_size: usize,
    pub train: TrainConfig,
    /// Drives weights, data and shuffling through separate substreams.
    pub seed: u64,
}

pub const TOY_EPOCHS: usize = 24;

impl ToyConfig {
    pub fn new(attention: Attention, seed: u64) -> Self {
        ToyConfig {
            attention,
            groups: 8,
            gamma_init: 0.0,
            beta_init: 1.0,
            normalize: true,
            widths: (8, 32),
            data: GeneratorParams {
                seed,
                ..GeneratorParams::default()
            },
            train_size: 4000,
            test_size: 2000,
            train: TrainConfig::toy(TOY_EPOCHS, seed),
            seed,
        }
    }

    /// Re-seeds every substream from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.train.epochs = epochs;
        self.train.decay_epochs = vec![(2 * epochs).div_ceil(3)];
        self
    }

    /// `conv5x5 -> relu -> maxpool2 -> conv3x3 -> relu [-> sge] -> gap -> dense -> xent`
    pub fn specs(&self) -> Vec<LayerSpec> {
        let (c1, c2) = self.widths;
        let mut specs = vec![
            LayerSpec::conv(1, c1, 5),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::conv(c1, c2, 3),
            LayerSpec::Relu,
        ];
        if self.attention == Attention::Sge {
            specs.push(LayerSpec::Sge {
                groups: self.groups,
                gamma_init: self.gamma_init,
                beta_init: self.beta_init,
                normalize: self.normalize,
                epsilon: DEFAULT_EPSILON,
            });
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(LayerSpec::dense(c2, self.data.classes));
        specs.push(LayerSpec::SoftmaxXent);
        specs
    }

    pub fn input_chw(&self) -> (usize, usize, usize) {
        (1, self.data.image_size, self.data.image_size)
    }

    pub fn build(&self) -> Result<Model<f32>> {
        build_model(&self.specs(), self.input_chw(), self.seed)
    }

    pub fn datasets(&self) -> Result<(SyntheticDataset, SyntheticDataset)> {
        Ok((
            SyntheticDataset::generate(&self.data, self.train_size, Stream::TrainData)?,
            SyntheticDataset::generate(&self.data, self.test_size, Stream::TestData)?,
        ))
    }

    /// Flat `key=value` echo of the resolved configuration.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let d = &self.data;
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("attention", self.attention.to_string()),
            ("groups", self.groups.to_string()),
            ("gamma_init", self.gamma_init.to_string()),
            ("beta_init", self.beta_init.to_string()),
            ("norm", if self.normalize { "on" } else { "off" }.to_string()),
            ("widths", format!("{}x{}", self.widths.0, self.widths.1)),
            ("train_size", self.train_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("decay_epochs", format!("{:?}", t.decay_epochs)),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("decay_sge_params", t.decay_sge_params.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("classes", d.classes.to_string()),
            ("image_size", d.image_size.to_string()),
            ("pattern_size", d.pattern_size.to_string()),
            ("noise", d.noise.to_string()),
            ("clutter", d.clutter.to_string()),
            ("amplitude", format!("{}..{}", d.amplitude.0, d.amplitude.1)),
            ("distractor_ratio", format!("{}..{}", d.distractor_ratio.0, d.distractor_ratio.1)),
        ];
        if self.attention == Attention::Sge {
            out.push((
                "placement",
                "after the last conv+relu (no batch norm in the toy net)".to_string(),
            ));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub config: ToyConfig,
    pub report: TrainReport<f32>,
    pub test_accuracy: f64,
}

impl ToyRun {
    pub fn model(&self) -> &Model<f32> {
        &self.report.model
    }
}

pub fn run_toy(config: &ToyConfig) -> Result<ToyRun> {
    let (train_set, test_set) = config.datasets()?;
    let model = config.build()?;
    let report = train(model, &train_set, Some(&test_set), &config.train)?;
    let test_accuracy = report.last(Split::Test).map_or(0.0, |m| m.accuracy);
    Ok(ToyRun {
        config: config.clone(),
        report,
        test_accuracy,
    })
}

/// Axis swept by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Groups,
    Init,
    Norm,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Groups => "groups",
            AblationAxis::Init => "init",
            AblationAxis::Norm => "norm",
        })
    }
}

/// Group counts tried by the groups sweep; those not dividing the SGE
/// site's channels are skipped.
pub const GROUP_SWEEP: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Labelled SGE configurations derived from `base` along `axis`.
pub fn ablation_settings(axis: AblationAxis, base: &ToyConfig) -> Vec<(String, ToyConfig)> {
    let base = ToyConfig {
        attention: Attention::Sge,
        ..base.clone()
    };
    match axis {
        AblationAxis::Groups => GROUP_SWEEP
            .iter()
            .filter(|&&g| base.widths.1 % g == 0)
            .map(|&groups| (format!("groups={groups}"), ToyConfig { groups, ..base.clone() }))
            .collect(),
        AblationAxis::Init => [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
            .iter()
            .map(|&(gamma_init, beta_init)| {
                (
                    format!("gamma={gamma_init},beta={beta_init}"),
                    ToyConfig {
                        gamma_init,
                        beta_init,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::Norm => [true, false]
            .iter()
            .map(|&normalize| {
                (
                    format!("norm={}", if normalize { "on" } else { "off" }),
                    ToyConfig {
                        normalize,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

/// Runs every setting of `axis` for seeds `0..seeds`, setting-major.
pub fn run_ablation(axis: AblationAxis, seeds: u64, base: &ToyConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (setting, cfg) in ablation_settings(axis, base) {
        for seed in 0..seeds {
            let run = run_toy(&cfg.clone().with_seed(seed))?;
            let last = run.report.last(Split::Test);
            rows.push(AblationRow {
                setting: setting.clone(),
                seed,
                test_accuracy: run.test_accuracy,
                test_loss: last.map_or(f64::NAN, |m| m.loss),
            });
        }
    }
    Ok(rows)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
