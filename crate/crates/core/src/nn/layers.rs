//! Forward and backward kernels for the layers of the toy network.

use crate::tensor::{FeatureMap, Real, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output `(height, width)`, or `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.stride == 0 || self.kernel == 0 || ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    /// Output columns `ox` whose input column `ox*stride + kx - padding`
    /// falls inside `[0, width)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if extent + p > k {
            ((extent - 1 + p - k) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward<T: Real>(
    x: &FeatureMap<T>,
    weight: &[T],
    bias: &[T],
    geo: &ConvGeometry,
) -> FeatureMap<T> {
    let s = x.shape();
    let (oh, ow) = geo.output_hw(s.h, s.w).expect("validated at build time");
    let out_shape = Shape {
        n: s.n,
        c: geo.out_channels,
        h: oh,
        w: ow,
    };
    let mut out = FeatureMap::zeros(out_shape);
    let k = geo.kernel;
    let (iplane, oplane) = (s.h * s.w, oh * ow);
    let input = x.as_slice();
    let output = out.as_mut_slice();
    for n in 0..s.n {
        for oc in 0..geo.out_channels {
            let obase = (n * geo.out_channels + oc) * oplane;
            let o = &mut output[obase..obase + oplane];
            o.iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..geo.in_channels {
                let ibase = (n * geo.in_channels + ic) * iplane;
                let inp = &input[ibase..ibase + iplane];
                for ky in 0..k {
                    let (ylo, yhi) = geo.valid_range(ky, s.h, oh);
                    for kx in 0..k {
                        let wv = weight[((oc * geo.in_channels + ic) * k + ky) * k + kx];
                        let (xlo, xhi) = geo.valid_range(kx, s.w, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * geo.stride + ky - geo.padding;
                            let ix0 = xlo * geo.stride + kx - geo.padding;
                            let orow = &mut o[oy * ow + xlo..oy * ow + xhi];
                            if geo.stride == 1 {
                                let irow = &inp[iy * s.w + ix0..iy * s.w + ix0 + orow.len()];
                                for (ov, iv) in orow.iter_mut().zip(irow) {
                                    *ov = *ov + wv * *iv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov = *ov + wv * inp[iy * s.w + ix0 + j * geo.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    x: &FeatureMap<T>,
    weight: &[T],
    d_out: &FeatureMap<T>,
    geo: &ConvGeometry,
) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let os = d_out.shape();
    let (oh, ow) = (os.h, os.w);
    let k = geo.kernel;
    let (iplane, oplane) = (s.h * s.w, oh * ow);
    let mut dx = FeatureMap::zeros(s);
    let mut dw = vec![0.0f64; weight.len()];
    let mut db = vec![0.0f64; geo.out_channels];
    let input = x.as_slice();
    let dy = d_out.as_slice();
    let dxs = dx.as_mut_slice();
    for n in 0..s.n {
        for oc in 0..geo.out_channels {
            let obase = (n * geo.out_channels + oc) * oplane;
            let g = &dy[obase..obase + oplane];
            db[oc] += g.iter().map(|v| v.as_f64()).sum::<f64>();
            for ic in 0..geo.in_channels {
                let ibase = (n * geo.in_channels + ic) * iplane;
                let inp = &input[ibase..ibase + iplane];
                let dinp = &mut dxs[ibase..ibase + iplane];
                for ky in 0..k {
                    let (ylo, yhi) = geo.valid_range(ky, s.h, oh);
                    for kx in 0..k {
                        let widx = ((oc * geo.in_channels + ic) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let (xlo, xhi) = geo.valid_range(kx, s.w, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy * geo.stride + ky - geo.padding;
                            let ix0 = xlo * geo.stride + kx - geo.padding;
                            let grow = &g[oy * ow + xlo..oy * ow + xhi];
                            if geo.stride == 1 {
                                let start = iy * s.w + ix0;
                                let irow = &inp[start..start + grow.len()];
                                for (gv, iv) in grow.iter().zip(irow) {
                                    acc = acc + *gv * *iv;
                                }
                                let drow = &mut dinp[start..start + grow.len()];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv = *dv + wv * *gv;
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    let idx = iy * s.w + ix0 + j * geo.stride;
                                    acc = acc + *gv * inp[idx];
                                    dinp[idx] = dinp[idx] + wv * *gv;
                                }
                            }
                        }
                        dw[widx] += acc.as_f64();
                    }
                }
            }
        }
    }
    (
        dx,
        dw.into_iter().map(T::from_f64).collect(),
        db.into_iter().map(T::from_f64).collect(),
    )
}

pub fn relu_forward<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(output: &FeatureMap<T>, d_out: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = d_out.clone();
    for (d, o) in dx.as_mut_slice().iter_mut().zip(output.as_slice()) {
        if *o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Non-overlapping `size x size` max pooling. Returns the output and, for
/// each output element, the flat input index that won.
pub fn maxpool_forward<T: Real>(x: &FeatureMap<T>, size: usize) -> (FeatureMap<T>, Vec<usize>) {
    let s = x.shape();
    let (oh, ow) = (s.h / size, s.w / size);
    let out_shape = Shape { h: oh, w: ow, ..s };
    let mut out = FeatureMap::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.volume()];
    let input = x.as_slice();
    for nc in 0..s.n * s.c {
        let ibase = nc * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ibase + oy * size * s.w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = ibase + (oy * size + dy) * s.w + ox * size + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                let o = nc * oh * ow + oy * ow + ox;
                out.as_mut_slice()[o] = input[best];
                argmax[o] = best;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<T: Real>(in_shape: Shape, argmax: &[usize], d_out: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(in_shape);
    let d = dx.as_mut_slice();
    for (&idx, g) in argmax.iter().zip(d_out.as_slice()) {
        d[idx] = d[idx] + *g;
    }
    dx
}

pub fn global_avg_pool_forward<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let s = x.shape();
    let m = s.h * s.w;
    let data = x
        .as_slice()
        .chunks_exact(m)
        .map(|plane| T::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64))
        .collect();
    FeatureMap::new(Shape { h: 1, w: 1, ..s }, data).expect("pooled values stay finite")
}

pub fn global_avg_pool_backward<T: Real>(in_shape: Shape, d_out: &FeatureMap<T>) -> FeatureMap<T> {
    let m = in_shape.h * in_shape.w;
    let scale = T::from_f64(1.0 / m as f64);
    let mut dx = FeatureMap::zeros(in_shape);
    for (plane, g) in dx.as_mut_slice().chunks_exact_mut(m).zip(d_out.as_slice()) {
        plane.iter_mut().for_each(|v| *v = *g * scale);
    }
    dx
}

/// Fully connected layer over the flattened `C x H x W` sample.
pub fn dense_forward<T: Real>(x: &FeatureMap<T>, weight: &[T], bias: &[T], outputs: usize) -> FeatureMap<T> {
    let s = x.shape();
    let inputs = s.c * s.h * s.w;
    let mut out = FeatureMap::zeros(Shape {
        n: s.n,
        c: outputs,
        h: 1,
        w: 1,
    });
    for n in 0..s.n {
        let xs = x.sample(n);
        for o in 0..outputs {
            let row = &weight[o * inputs..(o + 1) * inputs];
            let acc = row
                .iter()
                .zip(xs)
                .map(|(w, v)| w.as_f64() * v.as_f64())
                .sum::<f64>();
            out.as_mut_slice()[n * outputs + o] = T::from_f64(acc + bias[o].as_f64());
        }
    }
    out
}

pub fn dense_backward<T: Real>(
    x: &FeatureMap<T>,
    weight: &[T],
    d_out: &FeatureMap<T>,
    outputs: usize,
) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let inputs = s.c * s.h * s.w;
    let mut dx = FeatureMap::zeros(s);
    let mut dw = vec![0.0f64; weight.len()];
    let mut db = vec![0.0f64; outputs];
    for n in 0..s.n {
        let xs = x.sample(n);
        let g = &d_out.as_slice()[n * outputs..(n + 1) * outputs];
        let dxs: &mut [T] = &mut dx.as_mut_slice()[n * inputs..(n + 1) * inputs];
        for (o, gv) in g.iter().enumerate() {
            let gv = gv.as_f64();
            db[o] += gv;
            let row = &weight[o * inputs..(o + 1) * inputs];
            for ((dwv, xv), (dxv, wv)) in dw[o * inputs..(o + 1) * inputs]
                .iter_mut()
                .zip(xs)
                .zip(dxs.iter_mut().zip(row))
            {
                *dwv += gv * xv.as_f64();
                *dxv = T::from_f64(dxv.as_f64() + gv * wv.as_f64());
            }
        }
    }
    (
        dx,
        dw.into_iter().map(T::from_f64).collect(),
        db.into_iter().map(T::from_f64).collect(),
    )
}

/// Mean softmax cross-entropy over the batch.
#[derive(Debug, Clone)]
pub struct XentOutput<T> {
    pub mean_loss: f64,
    pub per_sample_loss: Vec<f64>,
    pub correct: usize,
    /// Gradient of `mean_loss` with respect to the logits.
    pub d_logits: FeatureMap<T>,
}

/// Logits are `(N, K, 1, 1)`. Ties in the arg-max resolve to the lowest
/// class index.
pub fn softmax_xent<T: Real>(logits: &FeatureMap<T>, labels: &[usize]) -> XentOutput<T> {
    let s = logits.shape();
    let k = s.c * s.h * s.w;
    let batch = s.n;
    let mut d = FeatureMap::zeros(s);
    let mut per_sample = Vec::with_capacity(batch);
    let mut correct = 0;
    for n in 0..batch {
        let z: Vec<f64> = logits.sample(n).iter().map(|v| v.as_f64()).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum = z.iter().map(|v| (v - max).exp()).sum::<f64>();
        let log_sum = max + sum.ln();
        let label = labels[n];
        per_sample.push(log_sum - z[label]);
        let pred = z
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > z[best] { i } else { best });
        if pred == label {
            correct += 1;
        }
        let dn = &mut d.as_mut_slice()[n * k..(n + 1) * k];
        for (i, dv) in dn.iter_mut().enumerate() {
            let p = (z[i] - log_sum).exp();
            let target = if i == label { 1.0 } else { 0.0 };
            *dv = T::from_f64((p - target) / batch as f64);
        }
    }
    XentOutput {
        mean_loss: per_sample.iter().sum::<f64>() / batch as f64,
        per_sample_loss: per_sample,
        correct,
        d_logits: d,
    }
}
