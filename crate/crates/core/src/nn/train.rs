//! Mini-batch SGD with momentum and weight decay.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use super::layers::softmax_xent;
use super::Model;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied at each epoch listed in `decay_epochs`.
    pub lr_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Whether SGE `gamma`/`beta` receive weight decay.
    pub decay_sge_params: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Toy defaults: rate 0.05 with one x0.1 step at two thirds of training,
    /// momentum 0.9, weight decay 1e-4.
    pub fn toy(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.05,
            lr_decay: 0.1,
            decay_epochs: vec![(2 * epochs).div_ceil(3)],
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_sge_params: false,
            batch_size: 32,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.lr_decay > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size > 0;
        if !ok {
            return Err(Error::InvalidParams(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }

    /// Rate used during 0-based epoch `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    /// Epoch 0 is the evaluation before any update.
    pub history: Vec<EpochMetrics>,
    pub steps: usize,
    pub model: Model<T>,
}

impl<T> TrainReport<T> {
    pub fn last(&self, split: Split) -> Option<&EpochMetrics> {
        self.history.iter().rev().find(|m| m.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub correct: usize,
    pub total: usize,
}

const EVAL_BATCH: usize = 256;

fn check_dataset<T: Real>(model: &Model<T>, data: &SyntheticDataset) -> Result<()> {
    if data.image_chw() != model.input_chw() {
        return Err(Error::ShapeIncompatible {
            index: 0,
            layer: model.specs()[0].name().to_string(),
            detail: format!(
                "dataset images are {:?}, model expects {:?}",
                data.image_chw(),
                model.input_chw()
            ),
        });
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.classes()) {
        return Err(Error::ShapeIncompatible {
            index: model.specs().len() - 1,
            layer: "softmax_xent".into(),
            detail: format!("label {bad} exceeds {} classes", model.classes()),
        });
    }
    Ok(())
}

/// Accuracy and mean cross-entropy over the whole dataset.
pub fn evaluate<T: Real>(model: &Model<T>, data: &SyntheticDataset) -> Result<Evaluation> {
    check_dataset(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut correct) = (0.0, 0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch::<T>(chunk);
        let logits = model.forward(&x)?;
        let out = softmax_xent(&logits, &labels);
        loss_sum += out.per_sample_loss.iter().sum::<f64>();
        correct += out.correct;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
        correct,
        total: data.len(),
    })
}

/// Heavy-ball momentum with L2 decay folded into the gradient:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: f64,
    weight_decay: f64,
    decay_mask: Vec<bool>,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Model<T>, config: &TrainConfig) -> Self {
        let info = model.param_info();
        Sgd {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            decay_mask: info.iter().map(|p| !p.is_sge || config.decay_sge_params).collect(),
            velocity: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for (((param, grad), vel), &decay) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(&self.decay_mask)
        {
            let wd = T::from_f64(if decay { self.weight_decay } else { 0.0 });
            for ((w, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v + *g + wd * *w;
                *w = *w - lr * *v;
            }
        }
    }
}

/// Trains `model` on `train_set`, evaluating `test_set` after every epoch.
/// Train-split rows after epoch 0 average the mini-batch losses and hits
/// seen during that epoch.
pub fn train<T: Real>(
    mut model: Model<T>,
    train_set: &SyntheticDataset,
    test_set: Option<&SyntheticDataset>,
    config: &TrainConfig,
) -> Result<TrainReport<T>> {
    config.validate()?;
    check_dataset(&model, train_set)?;
    if let Some(t) = test_set {
        check_dataset(&model, t)?;
    }
    let mut history = Vec::new();
    let record = |history: &mut Vec<EpochMetrics>, epoch: usize, split: Split, e: &Evaluation| {
        history.push(EpochMetrics {
            epoch,
            split,
            loss: e.mean_loss,
            accuracy: e.accuracy,
        });
    };
    record(&mut history, 0, Split::Train, &evaluate(&model, train_set)?);
    if let Some(t) = test_set {
        record(&mut history, 0, Split::Test, &evaluate(&model, t)?);
    }

    let mut opt = Sgd::new(&model, config);
    let mut rng = substream(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = train_set.batch::<T>(chunk);
            let (logits, caches) = model.forward_train(&x)?;
            let out = softmax_xent(&logits, &labels);
            if !out.mean_loss.is_finite() {
                return Err(Error::DivergedLoss {
                    epoch: epoch + 1,
                    step: steps,
                    loss: out.mean_loss,
                });
            }
            let grads = model.backward(&caches, &out.d_logits)?;
            opt.step(&mut model, &grads, lr);
            loss_sum += out.per_sample_loss.iter().sum::<f64>();
            correct += out.correct;
            steps += 1;
        }
        let n = train_set.len() as f64;
        record(
            &mut history,
            epoch + 1,
            Split::Train,
            &Evaluation {
                accuracy: correct as f64 / n,
                mean_loss: loss_sum / n,
                correct,
                total: train_set.len(),
            },
        );
        if let Some(t) = test_set {
            record(&mut history, epoch + 1, Split::Test, &evaluate(&model, t)?);
        }
    }
    Ok(TrainReport { history, steps, model })
}
