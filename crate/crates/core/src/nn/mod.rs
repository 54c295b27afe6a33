//! A small sequential network with hand-written backward passes, enough to
//! train a toy CNN with and without an SGE layer.

pub mod data;
pub mod layers;
pub mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::sge::{sge_backward, sge_forward, SgeForwardCache, SgeParams, DEFAULT_BETA_INIT, DEFAULT_EPSILON, DEFAULT_GAMMA_INIT};
use crate::tensor::{FeatureMap, Real, Shape};

use layers::ConvGeometry;

pub use data::{GeneratorParams, SyntheticDataset};
pub use train::{evaluate, train, EpochMetrics, Evaluation, Split, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping pooling with window and stride `size`.
    MaxPool { size: usize },
    Sge {
        groups: usize,
        gamma_init: f64,
        beta_init: f64,
        normalize: bool,
        epsilon: f64,
    },
    GlobalAvgPool,
    Dense { inputs: usize, outputs: usize },
    SoftmaxXent,
}

impl LayerSpec {
    /// Stride 1 with "same" padding for odd kernels.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn sge(groups: usize) -> Self {
        LayerSpec::Sge {
            groups,
            gamma_init: DEFAULT_GAMMA_INIT,
            beta_init: DEFAULT_BETA_INIT,
            normalize: true,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Sge { .. } => "sge",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxXent => "softmax_xent",
        }
    }

    /// Output `(C, H, W)` for an input of `(C, H, W)`.
    fn output_chw(&self, (c, h, w): (usize, usize, usize)) -> std::result::Result<(usize, usize, usize), String> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels != c {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                if out_channels == 0 {
                    return Err("needs at least one output channel".into());
                }
                let geo = ConvGeometry {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                };
                let (oh, ow) = geo
                    .output_hw(h, w)
                    .ok_or_else(|| format!("kernel {kernel} stride {stride} does not fit {h}x{w}"))?;
                Ok((out_channels, oh, ow))
            }
            LayerSpec::Relu => Ok((c, h, w)),
            LayerSpec::MaxPool { size } => {
                if size == 0 || h < size || w < size {
                    return Err(format!("window {size} does not fit {h}x{w}"));
                }
                Ok((c, h / size, w / size))
            }
            LayerSpec::Sge { groups, epsilon, .. } => {
                if groups == 0 || c % groups != 0 {
                    return Err(format!("{c} channels are not divisible into {groups} groups"));
                }
                if !(epsilon > 0.0) {
                    return Err(format!("epsilon must be positive, got {epsilon}"));
                }
                Ok((c, h, w))
            }
            LayerSpec::GlobalAvgPool => Ok((c, 1, 1)),
            LayerSpec::Dense { inputs, outputs } => {
                if inputs != c * h * w {
                    return Err(format!("expects {inputs} inputs, got {}", c * h * w));
                }
                if outputs == 0 {
                    return Err("needs at least one output".into());
                }
                Ok((outputs, 1, 1))
            }
            LayerSpec::SoftmaxXent => {
                if h != 1 || w != 1 {
                    return Err(format!("expects (K, 1, 1) logits, got ({c}, {h}, {w})"));
                }
                Ok((c, 1, 1))
            }
        }
    }
}

/// A trainable tensor's metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub is_sge: bool,
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv {
        geo: ConvGeometry,
        weight: Vec<T>,
        bias: Vec<T>,
    },
    Relu,
    MaxPool { size: usize },
    Sge(SgeParams<T>),
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    },
}

/// Per-layer state kept by a training forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv(FeatureMap<T>),
    Relu(FeatureMap<T>),
    MaxPool { in_shape: Shape, argmax: Vec<usize> },
    Sge(Box<SgeForwardCache<T>>),
    GlobalAvgPool(Shape),
    Dense(FeatureMap<T>),
}

/// A sequential network ending in softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct Model<T> {
    input_chw: (usize, usize, usize),
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
    classes: usize,
}

/// Checks the layer chain and returns the logit count.
fn check_specs(specs: &[LayerSpec], input_chw: (usize, usize, usize)) -> Result<usize> {
    let incompatible = |index: usize, detail: String| Error::ShapeIncompatible {
        index,
        layer: specs.get(index).map_or("<end>", |s| s.name()).to_string(),
        detail,
    };
    match specs.last() {
        Some(LayerSpec::SoftmaxXent) => {}
        _ => return Err(incompatible(specs.len().saturating_sub(1), "the last layer must be softmax_xent".into())),
    }
    let mut chw = input_chw;
    for (i, spec) in specs.iter().enumerate() {
        if matches!(spec, LayerSpec::SoftmaxXent) && i + 1 != specs.len() {
            return Err(incompatible(i, "softmax_xent may only appear last".into()));
        }
        chw = spec.output_chw(chw).map_err(|d| incompatible(i, d))?;
    }
    Ok(chw.0)
}

/// Builds a model with weights drawn from the seed's weight substream:
/// He-normal for convolutions, `N(0, 1/fan_in)` for dense layers, zero
/// biases, and SGE parameters at their declared constants.
pub fn build_model<T: Real>(specs: &[LayerSpec], input_chw: (usize, usize, usize), seed: u64) -> Result<Model<T>> {
    let classes = check_specs(specs, input_chw)?;
    let mut rng = substream(seed, Stream::Weights);
    let mut normal = |count: usize, std: f64| -> Vec<T> {
        (0..count)
            .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let mut layers = Vec::new();
    for spec in specs {
        let layer = match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let fan_in = in_channels * kernel * kernel;
                Layer::Conv {
                    geo: ConvGeometry {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    weight: normal(out_channels * fan_in, (2.0 / fan_in as f64).sqrt()),
                    bias: vec![T::zero(); out_channels],
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size } => Layer::MaxPool { size },
            LayerSpec::Sge {
                groups,
                gamma_init,
                beta_init,
                normalize,
                epsilon,
            } => Layer::Sge(
                SgeParams::new(groups, gamma_init, beta_init)
                    .with_epsilon(epsilon)
                    .with_normalize(normalize),
            ),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Dense { inputs, outputs } => Layer::Dense {
                inputs,
                outputs,
                weight: normal(inputs * outputs, (1.0 / inputs as f64).sqrt()),
                bias: vec![T::zero(); outputs],
            },
            LayerSpec::SoftmaxXent => continue,
        };
        layers.push(layer);
    }
    Ok(Model {
        input_chw,
        specs: specs.to_vec(),
        layers,
        classes,
    })
}

impl<T: Real> Model<T> {
    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_chw(&self) -> (usize, usize, usize) {
        self.input_chw
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Indices (into [`Model::layers`]) of every SGE layer.
    pub fn sge_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Sge(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sge_params(&self, layer: usize) -> Result<&SgeParams<T>> {
        match self.layers.get(layer) {
            Some(Layer::Sge(p)) => Ok(p),
            _ => Err(Error::LayerNotFound(layer)),
        }
    }

    pub fn sge_params_mut(&mut self, layer: usize) -> Result<&mut SgeParams<T>> {
        match self.layers.get_mut(layer) {
            Some(Layer::Sge(p)) => Ok(p),
            _ => Err(Error::LayerNotFound(layer)),
        }
    }

    /// Trainable tensors in declaration order.
    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { geo, .. } => {
                    let k = geo.kernel;
                    out.push(ParamInfo {
                        name: format!("{i}.conv.weight"),
                        dims: vec![geo.out_channels, geo.in_channels, k, k],
                        is_sge: false,
                    });
                    out.push(ParamInfo {
                        name: format!("{i}.conv.bias"),
                        dims: vec![geo.out_channels],
                        is_sge: false,
                    });
                }
                Layer::Sge(p) => {
                    for what in ["gamma", "beta"] {
                        out.push(ParamInfo {
                            name: format!("{i}.sge.{what}"),
                            dims: vec![p.groups],
                            is_sge: true,
                        });
                    }
                }
                Layer::Dense { inputs, outputs, .. } => {
                    out.push(ParamInfo {
                        name: format!("{i}.dense.weight"),
                        dims: vec![*outputs, *inputs],
                        is_sge: false,
                    });
                    out.push(ParamInfo {
                        name: format!("{i}.dense.bias"),
                        dims: vec![*outputs],
                        is_sge: false,
                    });
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Sge(p) => {
                    out.push(&p.gamma);
                    out.push(&p.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Sge(p) => {
                    out.push(&mut p.gamma);
                    out.push(&mut p.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Replaces every parameter, checking counts and lengths.
    pub fn load_params(&mut self, values: &[Vec<T>]) -> Result<()> {
        let info = self.param_info();
        if values.len() != info.len() {
            return Err(Error::InvalidParams(format!(
                "model has {} parameter tensors, got {}",
                info.len(),
                values.len()
            )));
        }
        for (pi, v) in info.iter().zip(values) {
            let expected: usize = pi.dims.iter().product();
            if v.len() != expected {
                return Err(Error::InvalidParams(format!(
                    "{} expects {} values, got {}",
                    pi.name,
                    expected,
                    v.len()
                )));
            }
        }
        for (dst, src) in self.params_mut().into_iter().zip(values) {
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let s = x.shape();
        let (c, h, w) = self.input_chw;
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: [s.n, c, h, w],
                found: s.dims(),
            });
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer<T>, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, Option<LayerCache<T>>)> {
        Ok(match layer {
            Layer::Conv { geo, weight, bias } => (layers::conv2d_forward(x, weight, bias, geo), None),
            Layer::Relu => (layers::relu_forward(x), None),
            Layer::MaxPool { size } => {
                let (y, argmax) = layers::maxpool_forward(x, *size);
                (
                    y,
                    Some(LayerCache::MaxPool {
                        in_shape: x.shape(),
                        argmax,
                    }),
                )
            }
            Layer::Sge(p) => {
                let (y, cache) = sge_forward(x, p)?;
                (y, Some(LayerCache::Sge(Box::new(cache))))
            }
            Layer::GlobalAvgPool => (layers::global_avg_pool_forward(x), None),
            Layer::Dense {
                outputs, weight, bias, ..
            } => (layers::dense_forward(x, weight, bias, *outputs), None),
        })
    }

    /// Logits `(N, K, 1, 1)`.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = Self::layer_forward(layer, &cur)?.0;
        }
        Ok(cur)
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward_train(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, Vec<LayerCache<T>>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = Self::layer_forward(layer, &cur)?;
            let cache = match (layer, cache) {
                (_, Some(c)) => c,
                (Layer::Conv { .. }, None) => LayerCache::Conv(cur),
                (Layer::Relu, None) => LayerCache::Relu(y.clone()),
                (Layer::GlobalAvgPool, None) => LayerCache::GlobalAvgPool(cur.shape()),
                (Layer::Dense { .. }, None) => LayerCache::Dense(cur),
                _ => unreachable!("pool and sge layers always return a cache"),
            };
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Parameter gradients in declaration order, given the logit gradient.
    pub fn backward(&self, caches: &[LayerCache<T>], d_logits: &FeatureMap<T>) -> Result<Vec<Vec<T>>> {
        if caches.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grads: Vec<Vec<T>> = Vec::new();
        let mut d = d_logits.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            d = match (layer, cache) {
                (Layer::Conv { geo, weight, .. }, LayerCache::Conv(x)) => {
                    let (dx, dw, db) = layers::conv2d_backward(x, weight, &d, geo);
                    grads.push(db);
                    grads.push(dw);
                    dx
                }
                (Layer::Relu, LayerCache::Relu(y)) => layers::relu_backward(y, &d),
                (Layer::MaxPool { .. }, LayerCache::MaxPool { in_shape, argmax }) => {
                    layers::maxpool_backward(*in_shape, argmax, &d)
                }
                (Layer::Sge(p), LayerCache::Sge(cache)) => {
                    let g = sge_backward(cache, &d, p)?;
                    grads.push(g.d_beta);
                    grads.push(g.d_gamma);
                    g.d_input
                }
                (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(s)) => layers::global_avg_pool_backward(*s, &d),
                (Layer::Dense { outputs, weight, .. }, LayerCache::Dense(x)) => {
                    let (dx, dw, db) = layers::dense_backward(x, weight, &d, *outputs);
                    grads.push(db);
                    grads.push(dw);
                    dx
                }
                _ => return Err(Error::StaleCache("cache kind does not match layer".into())),
            };
        }
        grads.reverse();
        Ok(grads)
    }

    /// Input and output of layer `layer` for a batch.
    pub fn probe(&self, x: &FeatureMap<T>, layer: usize) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        self.check_input(x)?;
        if layer >= self.layers.len() {
            return Err(Error::LayerNotFound(layer));
        }
        let mut cur = x.clone();
        for l in &self.layers[..layer] {
            cur = Self::layer_forward(l, &cur)?.0;
        }
        let out = Self::layer_forward(&self.layers[layer], &cur)?.0;
        Ok((cur, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(1, 8, 3),
            LayerSpec::Relu,
            LayerSpec::sge(4),
            LayerSpec::GlobalAvgPool,
            LayerSpec::dense(8, 4),
            LayerSpec::SoftmaxXent,
        ]
    }

    #[test]
    fn sge_adds_two_per_group() {
        let model = build_model::<f32>(&small_specs(), (1, 8, 8), 0).unwrap();
        let sge: usize = model
            .param_info()
            .iter()
            .filter(|p| p.is_sge)
            .map(|p| p.dims.iter().product::<usize>())
            .sum();
        assert_eq!(sge, 8);
        let p = model.sge_params(2).unwrap();
        assert!(p.gamma.iter().all(|v| *v == 0.0) && p.beta.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn indivisible_groups_rejected() {
        let mut specs = small_specs();
        specs[2] = LayerSpec::sge(3);
        match build_model::<f32>(&specs, (1, 8, 8), 0) {
            Err(Error::ShapeIncompatible { index, layer, .. }) => {
                assert_eq!(index, 2);
                assert_eq!(layer, "sge");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn other_incompatibilities() {
        let mut specs = small_specs();
        specs[4] = LayerSpec::dense(16, 4);
        assert!(matches!(
            build_model::<f32>(&specs, (1, 8, 8), 0),
            Err(Error::ShapeIncompatible { index: 4, .. })
        ));
        assert!(build_model::<f32>(&small_specs(), (3, 8, 8), 0).is_err());
        assert!(build_model::<f32>(&small_specs()[..5], (1, 8, 8), 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model::<f32>(&small_specs(), (1, 8, 8), 11).unwrap();
        let b = build_model::<f32>(&small_specs(), (1, 8, 8), 11).unwrap();
        let c = build_model::<f32>(&small_specs(), (1, 8, 8), 12).unwrap();
        let bits = |m: &Model<f32>| -> Vec<u32> { m.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }
}
