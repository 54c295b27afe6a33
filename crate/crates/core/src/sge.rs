//! Spatial group-wise enhance.
//!
//! For every sample and every channel group the operator computes the
//! spatial mean `g` of the group's sub-feature vectors, scores each
//! position by `c_i = g . x_i`, standardizes the scores over the spatial
//! positions, applies a per-group affine `a_i = gamma * c_hat_i + beta` and
//! rescales the sub-feature by `sigmoid(a_i)`.
//!
//! The standardization uses the population standard deviation and the
//! denominator `sigma_c + epsilon` (not `sqrt(var + epsilon)`). All
//! per-cell reductions run in `f64` whatever the element type.

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, GroupLayout, Real, Shape};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_GROUPS: usize = 64;
pub const DEFAULT_GAMMA_INIT: f64 = 0.0;
pub const DEFAULT_BETA_INIT: f64 = 1.0;

/// Per-group scale and shift plus the operator's fixed settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SgeParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: f64,
    pub groups: usize,
    /// When false the raw similarity `c_i` is fed to the affine instead of
    /// its standardized value.
    pub normalize: bool,
}

impl<T: Real> SgeParams<T> {
    /// Constant initialization with the default epsilon and normalization on.
    pub fn new(groups: usize, gamma_init: f64, beta_init: f64) -> Self {
        SgeParams {
            gamma: vec![T::from_f64(gamma_init); groups],
            beta: vec![T::from_f64(beta_init); groups],
            epsilon: DEFAULT_EPSILON,
            groups,
            normalize: true,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidParams("group count must be positive".into()));
        }
        if self.gamma.len() != self.groups || self.beta.len() != self.groups {
            return Err(Error::InvalidParams(format!(
                "expected {} gamma/beta entries, got {}/{}",
                self.groups,
                self.gamma.len(),
                self.beta.len()
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.gamma.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite gamma or beta".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

/// Every intermediate of a forward pass, laid out cell-major where a cell
/// is one `(sample, group)` pair.
#[derive(Debug, Clone)]
pub struct SgeForwardCache<T> {
    pub layout: GroupLayout,
    pub epsilon: f64,
    pub normalize: bool,
    /// `cells x C/G` spatial means.
    pub g_vec: Vec<f64>,
    /// `cells x m` raw similarities.
    pub c: Vec<f64>,
    pub mu_c: Vec<f64>,
    pub sigma_c: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub a: Vec<f64>,
    pub gate: Vec<f64>,
    pub input: FeatureMap<T>,
}

impl<T: Real> SgeForwardCache<T> {
    #[inline]
    fn cell(&self, n: usize, g: usize) -> usize {
        n * self.layout.groups + g
    }

    fn check(&self, n: usize, g: usize) -> Result<()> {
        if n >= self.layout.shape.n {
            return Err(Error::IndexOutOfRange {
                what: "batch",
                index: n,
                bound: self.layout.shape.n,
            });
        }
        if g >= self.layout.groups {
            return Err(Error::IndexOutOfRange {
                what: "group",
                index: g,
                bound: self.layout.groups,
            });
        }
        Ok(())
    }

    fn per_position<'a>(&self, v: &'a [f64], n: usize, g: usize) -> &'a [f64] {
        let m = self.layout.positions;
        let k = self.cell(n, g);
        &v[k * m..(k + 1) * m]
    }

    pub fn g_of(&self, n: usize, g: usize) -> &[f64] {
        let d = self.layout.per_group_channels;
        let k = self.cell(n, g);
        &self.g_vec[k * d..(k + 1) * d]
    }

    pub fn c_of(&self, n: usize, g: usize) -> &[f64] {
        self.per_position(&self.c, n, g)
    }

    pub fn c_hat_of(&self, n: usize, g: usize) -> &[f64] {
        self.per_position(&self.c_hat, n, g)
    }

    pub fn gate_of(&self, n: usize, g: usize) -> &[f64] {
        self.per_position(&self.gate, n, g)
    }

    pub fn moments_of(&self, n: usize, g: usize) -> (f64, f64) {
        let k = self.cell(n, g);
        (self.mu_c[k], self.sigma_c[k])
    }
}

/// Gradients of a scalar loss with respect to the operator's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SgeGradients<T> {
    pub d_input: FeatureMap<T>,
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Runs the operator and returns the enhanced map with its cache.
pub fn sge_forward<T: Real>(
    fm: &FeatureMap<T>,
    params: &SgeParams<T>,
) -> Result<(FeatureMap<T>, SgeForwardCache<T>)> {
    params.validate()?;
    if let Some(index) = fm.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    let layout = GroupLayout::new(fm.shape(), params.groups)?;
    let (cells, dim, m) = (layout.cells(), layout.per_group_channels, layout.positions);
    let inv_m = 1.0 / m as f64;

    let mut g_vec = vec![0.0; cells * dim];
    let mut c = vec![0.0; cells * m];
    let mut mu_c = vec![0.0; cells];
    let mut sigma_c = vec![0.0; cells];
    let mut c_hat = vec![0.0; cells * m];
    let mut a = vec![0.0; cells * m];
    let mut gate = vec![0.0; cells * m];
    let mut out = FeatureMap::zeros(fm.shape());

    let input = fm.as_slice();
    let output = out.as_mut_slice();
    for k in 0..cells {
        let group = k % params.groups;
        let range = k * dim * m..(k + 1) * dim * m;
        let x = &input[range.clone()];
        let gv = &mut g_vec[k * dim..(k + 1) * dim];
        for (gd, plane) in gv.iter_mut().zip(x.chunks_exact(m)) {
            *gd = plane.iter().map(|v| v.as_f64()).sum::<f64>() * inv_m;
        }

        let cs = &mut c[k * m..(k + 1) * m];
        for (gd, plane) in gv.iter().zip(x.chunks_exact(m)) {
            for (ci, xi) in cs.iter_mut().zip(plane) {
                *ci += gd * xi.as_f64();
            }
        }

        let mu = cs.iter().sum::<f64>() * inv_m;
        let var = cs.iter().map(|ci| (ci - mu) * (ci - mu)).sum::<f64>() * inv_m;
        let sigma = var.sqrt();
        mu_c[k] = mu;
        sigma_c[k] = sigma;

        let gamma = params.gamma[group].as_f64();
        let beta = params.beta[group].as_f64();
        let den = sigma + params.epsilon;
        let span = k * m..(k + 1) * m;
        for (((ci, hi), ai), si) in cs
            .iter()
            .zip(&mut c_hat[span.clone()])
            .zip(&mut a[span.clone()])
            .zip(&mut gate[span.clone()])
        {
            *hi = if params.normalize { (ci - mu) / den } else { *ci };
            *ai = gamma * *hi + beta;
            *si = sigmoid(*ai);
        }

        let s = &gate[span];
        for (plane_in, plane_out) in x.chunks_exact(m).zip(output[range].chunks_exact_mut(m)) {
            for ((o, xi), si) in plane_out.iter_mut().zip(plane_in).zip(s) {
                *o = T::from_f64(xi.as_f64() * si);
            }
        }
    }

    let cache = SgeForwardCache {
        layout,
        epsilon: params.epsilon,
        normalize: params.normalize,
        g_vec,
        c,
        mu_c,
        sigma_c,
        c_hat,
        a,
        gate,
        input: fm.clone(),
    };
    Ok((out, cache))
}

/// Exact gradients of `sum(d_output * output)` with respect to the input,
/// `gamma` and `beta`, differentiating through the spatial mean, the dot
/// products and both normalization moments. `epsilon` is a constant; at
/// `sigma_c == 0` the standard-deviation path contributes nothing because
/// every `c_i - mu_c` vanishes.
pub fn sge_backward<T: Real>(
    cache: &SgeForwardCache<T>,
    d_output: &FeatureMap<T>,
    params: &SgeParams<T>,
) -> Result<SgeGradients<T>> {
    params.validate()?;
    let layout = cache.layout;
    if d_output.shape() != layout.shape {
        return Err(Error::StaleCache(format!(
            "cache holds {} but d_output is {}",
            layout.shape,
            d_output.shape()
        )));
    }
    if params.groups != layout.groups
        || params.normalize != cache.normalize
        || params.epsilon != cache.epsilon
    {
        return Err(Error::StaleCache(format!(
            "cache built with G={} normalize={} epsilon={}, params have G={} normalize={} epsilon={}",
            layout.groups,
            cache.normalize,
            cache.epsilon,
            params.groups,
            params.normalize,
            params.epsilon
        )));
    }

    let (cells, dim, m) = (layout.cells(), layout.per_group_channels, layout.positions);
    let inv_m = 1.0 / m as f64;
    let mut d_gamma = vec![0.0f64; params.groups];
    let mut d_beta = vec![0.0f64; params.groups];
    let mut d_input = FeatureMap::<T>::zeros(layout.shape);

    let mut da = vec![0.0; m];
    let mut dc = vec![0.0; m];
    let input = cache.input.as_slice();
    let dy_all = d_output.as_slice();
    let dx_all = d_input.as_mut_slice();
    for k in 0..cells {
        let group = k % params.groups;
        let range = k * dim * m..(k + 1) * dim * m;
        let x = &input[range.clone()];
        let dy = &dy_all[range.clone()];
        let span = k * m..(k + 1) * m;
        let s = &cache.gate[span.clone()];
        let c_hat = &cache.c_hat[span.clone()];
        let c = &cache.c[span];
        let gv = &cache.g_vec[k * dim..(k + 1) * dim];

        // d loss / d gate_i = sum_d dy[d,i] x[d,i]
        da.iter_mut().for_each(|v| *v = 0.0);
        for (px, pdy) in x.chunks_exact(m).zip(dy.chunks_exact(m)) {
            for ((dai, xi), dyi) in da.iter_mut().zip(px).zip(pdy) {
                *dai += dyi.as_f64() * xi.as_f64();
            }
        }
        for (dai, si) in da.iter_mut().zip(s) {
            *dai *= si * (1.0 - si);
        }
        d_beta[group] += da.iter().sum::<f64>();
        d_gamma[group] += da.iter().zip(c_hat).map(|(d, h)| d * h).sum::<f64>();

        let gamma = params.gamma[group].as_f64();
        if cache.normalize {
            let (mu, sigma) = (cache.mu_c[k], cache.sigma_c[k]);
            let den = sigma + cache.epsilon;
            // d c_hat = gamma * da
            let mean_dh = gamma * da.iter().sum::<f64>() * inv_m;
            let d_sigma = -gamma * da.iter().zip(c_hat).map(|(d, h)| d * h).sum::<f64>() / den;
            let sigma_scale = if sigma > 0.0 { d_sigma * inv_m / sigma } else { 0.0 };
            for ((dci, dai), ci) in dc.iter_mut().zip(&da).zip(c) {
                *dci = (gamma * dai - mean_dh) / den + sigma_scale * (ci - mu);
            }
        } else {
            for (dci, dai) in dc.iter_mut().zip(&da) {
                *dci = gamma * dai;
            }
        }

        // c_j = sum_d g_d x[d,j],  g_d = (1/m) sum_i x[d,i]
        let dx = &mut dx_all[range];
        for (((px, pdy), pdx), gd) in x
            .chunks_exact(m)
            .zip(dy.chunks_exact(m))
            .zip(dx.chunks_exact_mut(m))
            .zip(gv)
        {
            let through_mean = px
                .iter()
                .zip(&dc)
                .map(|(xj, dcj)| xj.as_f64() * dcj)
                .sum::<f64>()
                * inv_m;
            for (((dxi, dyi), si), dci) in pdx.iter_mut().zip(pdy).zip(s).zip(&dc) {
                *dxi = T::from_f64(dyi.as_f64() * si + dci * gd + through_mean);
            }
        }
    }

    Ok(SgeGradients {
        d_input,
        d_gamma: d_gamma.into_iter().map(T::from_f64).collect(),
        d_beta: d_beta.into_iter().map(T::from_f64).collect(),
    })
}

/// `c_i = |g| |x_i| cos(theta_i)` for one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityRecord {
    pub g_norm: f64,
    pub x_norm: f64,
    pub cos_theta: f64,
}

impl SimilarityRecord {
    pub fn product(&self) -> f64 {
        self.g_norm * self.x_norm * self.cos_theta
    }
}

/// Splits every cached similarity of cell `(n, g)` into length and angle
/// factors. The cosine is 0 when either vector has zero length.
pub fn similarity_decomposition<T: Real>(
    cache: &SgeForwardCache<T>,
    n: usize,
    g: usize,
) -> Result<Vec<SimilarityRecord>> {
    cache.check(n, g)?;
    let layout = cache.layout;
    let m = layout.positions;
    let gv = cache.g_of(n, g);
    let g_norm = gv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let x = &cache.input.as_slice()[layout.cell_range(n, g)];
    Ok((0..m)
        .map(|i| {
            let (mut dot, mut sq) = (0.0, 0.0);
            for (d, gd) in gv.iter().enumerate() {
                let xi = x[d * m + i].as_f64();
                dot += gd * xi;
                sq += xi * xi;
            }
            let x_norm = sq.sqrt();
            let cos_theta = if g_norm > 0.0 && x_norm > 0.0 {
                (dot / (g_norm * x_norm)).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            SimilarityRecord {
                g_norm,
                x_norm,
                cos_theta,
            }
        })
        .collect())
}

/// Trainable parameters of one SGE instance: one `gamma` and one `beta`
/// per group, independent of `C`, `H` and `W`.
pub fn count_params(_channels: usize, groups: usize) -> u64 {
    2 * groups as u64
}

/// Multiply-adds of one forward pass. Per group and sample, with
/// `D = C/G` and `m = H*W`:
///
/// * spatial mean: `m * D`
/// * dot products: `m * D`
/// * mean and variance of `c`: `2 * m`
/// * standardization, affine and sigmoid: one each per position
/// * gate scaling: `D` per position
///
/// giving `m * (3D + 5)`. The square root and the `1/m` scalings are one
/// per group and are not counted.
pub fn count_flops(batch: usize, channels: usize, height: usize, width: usize, groups: usize) -> u64 {
    let m = (height * width) as u64;
    let dim = (channels / groups.max(1)) as u64;
    batch as u64 * groups as u64 * m * (3 * dim + 5)
}

/// `count_flops` with a checked shape.
pub fn count_flops_checked(shape: Shape, groups: usize) -> Result<u64> {
    GroupLayout::new(shape, groups)?;
    Ok(count_flops(shape.n, shape.c, shape.h, shape.w, groups))
}
