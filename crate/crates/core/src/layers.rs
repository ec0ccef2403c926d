//! Differentiable 1-D building blocks over time-major `Mat`s.
//!
//! Each layer stores only hyper-parameters and `ParamId`s; weights live in a
//! shared `ParamSet`. `forward` returns the output plus whatever the matching
//! `backward` needs, and `backward` accumulates parameter gradients into a
//! `ParamSet` laid out like the weights.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::linalg::{gemm, View};
use crate::tensor::{Mat, ParamId, ParamSet};

fn uniform_init(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    let dist = Uniform::new(-bound, bound).expect("valid bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Valid/zero-padded strided 1-D convolution. Weights are `[kernel, c_in, c_out]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct ConvCache {
    padded: Mat,
    t_out: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (kernel * c_in) as f64;
        let w = ps.add(format!("{name}.weight"), &[kernel, c_in, c_out], uniform_init(rng, kernel * c_in * c_out, (6.0 / fan_in).sqrt()));
        let b = ps.add(format!("{name}.bias"), &[c_out], vec![0.0; c_out]);
        Conv1d { w, b, kernel, stride, pad, c_in, c_out }
    }

    /// "Same" length convolution for odd kernels at stride 1.
    pub fn same(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self::new(ps, name, c_in, c_out, kernel, 1, kernel / 2, rng)
    }

    pub fn out_len(&self, t_in: usize) -> Option<usize> {
        let t = t_in + 2 * self.pad;
        (t >= self.kernel).then(|| (t - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, ps: &ParamSet, x: &Mat) -> (Mat, ConvCache) {
        assert_eq!(x.cols, self.c_in, "conv input channels");
        let t_out = self.out_len(x.rows).expect("conv input shorter than kernel");
        let padded = if self.pad == 0 {
            x.clone()
        } else {
            let mut p = Mat::zeros(x.rows + 2 * self.pad, self.c_in);
            p.data[self.pad * self.c_in..(self.pad + x.rows) * self.c_in].copy_from_slice(&x.data);
            p
        };
        let mut y = Mat::zeros(t_out, self.c_out);
        let bias = ps.get(self.b);
        for r in 0..t_out {
            y.row_mut(r).copy_from_slice(bias);
        }
        let kc = self.kernel * self.c_in;
        let cols = View { data: &padded.data, rows: t_out, cols: kc, row_stride: self.stride * self.c_in, col_stride: 1 };
        gemm(1.0, cols, View::row_major(ps.get(self.w), kc, self.c_out), 1.0, &mut y.data);
        (y, ConvCache { padded, t_out })
    }

    pub fn backward(&self, ps: &ParamSet, cache: &ConvCache, dy: &Mat, grads: &mut ParamSet) -> Mat {
        let kc = self.kernel * self.c_in;
        let t_out = cache.t_out;
        debug_assert_eq!(dy.shape(), (t_out, self.c_out));
        let cols = View { data: &cache.padded.data, rows: t_out, cols: kc, row_stride: self.stride * self.c_in, col_stride: 1 };
        let dyv = View::row_major(&dy.data, t_out, self.c_out);
        gemm(1.0, cols.t(), dyv, 1.0, grads.get_mut(self.w));
        let db = grads.get_mut(self.b);
        for r in 0..t_out {
            for (g, v) in db.iter_mut().zip(dy.row(r)) {
                *g += v;
            }
        }
        let mut dcols = vec![0.0; t_out * kc];
        gemm(1.0, dyv, View::row_major(ps.get(self.w), kc, self.c_out).t(), 0.0, &mut dcols);
        let mut dpad = vec![0.0; cache.padded.data.len()];
        let step = self.stride * self.c_in;
        for r in 0..t_out {
            let dst = &mut dpad[r * step..r * step + kc];
            for (d, s) in dst.iter_mut().zip(&dcols[r * kc..(r + 1) * kc]) {
                *d += s;
            }
        }
        let t_in = cache.padded.rows - 2 * self.pad;
        Mat::from_vec(t_in, self.c_in, dpad[self.pad * self.c_in..(self.pad + t_in) * self.c_in].to_vec())
    }
}

/// Per-channel 1-D convolution with "same" padding. Weights are `[kernel, channels]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub channels: usize,
}

impl DepthwiseConv1d {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let w = ps.add(format!("{name}.weight"), &[kernel, channels], uniform_init(rng, kernel * channels, (6.0 / kernel as f64).sqrt()));
        let b = ps.add(format!("{name}.bias"), &[channels], vec![0.0; channels]);
        DepthwiseConv1d { w, b, kernel, channels }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Mat) -> Mat {
        let (t, c) = x.shape();
        let half = (self.kernel / 2) as isize;
        let w = ps.get(self.w);
        let mut y = Mat::zeros(t, c);
        for r in 0..t {
            y.row_mut(r).copy_from_slice(ps.get(self.b));
        }
        for r in 0..t {
            for i in 0..self.kernel {
                let src = r as isize + i as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = &x.data[src as usize * c..(src as usize + 1) * c];
                let wr = &w[i * c..(i + 1) * c];
                let yr = &mut y.data[r * c..(r + 1) * c];
                for ch in 0..c {
                    yr[ch] += xr[ch] * wr[ch];
                }
            }
        }
        y
    }

    pub fn backward(&self, ps: &ParamSet, x: &Mat, dy: &Mat, grads: &mut ParamSet) -> Mat {
        let (t, c) = x.shape();
        let half = (self.kernel / 2) as isize;
        let w = ps.get(self.w);
        let mut dx = Mat::zeros(t, c);
        {
            let db = grads.get_mut(self.b);
            for r in 0..t {
                for (g, v) in db.iter_mut().zip(dy.row(r)) {
                    *g += v;
                }
            }
        }
        let dw = grads.get_mut(self.w);
        for r in 0..t {
            for i in 0..self.kernel {
                let src = r as isize + i as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let s = src as usize;
                for ch in 0..c {
                    let g = dy.data[r * c + ch];
                    dw[i * c + ch] += g * x.data[s * c + ch];
                    dx.data[s * c + ch] += g * w[i * c + ch];
                }
            }
        }
        dx
    }
}

/// Fully connected layer, weights `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), &[n_in, n_out], uniform_init(rng, n_in * n_out, bound));
        let b = ps.add(format!("{name}.bias"), &[n_out], vec![0.0; n_out]);
        Linear { w, b, n_in, n_out }
    }

    pub fn forward(&self, ps: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut y = ps.get(self.b).to_vec();
        gemm(1.0, View::row_major(x, 1, self.n_in), View::row_major(ps.get(self.w), self.n_in, self.n_out), 1.0, &mut y);
        y
    }

    pub fn backward(&self, ps: &ParamSet, x: &[f64], dy: &[f64], grads: &mut ParamSet) -> Vec<f64> {
        {
            let dw = grads.get_mut(self.w);
            for i in 0..self.n_in {
                for o in 0..self.n_out {
                    dw[i * self.n_out + o] += x[i] * dy[o];
                }
            }
        }
        for (g, v) in grads.get_mut(self.b).iter_mut().zip(dy) {
            *g += v;
        }
        let w = ps.get(self.w);
        (0..self.n_in).map(|i| (0..self.n_out).map(|o| w[i * self.n_out + o] * dy[o]).sum()).collect()
    }
}

/// Max pooling along time, applied per channel.
#[derive(Clone, Copy, Debug)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool1d {
    pub fn out_len(&self, t_in: usize) -> Option<usize> {
        (t_in >= self.kernel).then(|| (t_in - self.kernel) / self.stride + 1)
    }

    /// Returns the pooled map and, per output element, the flat input index it came from.
    pub fn forward(&self, x: &Mat) -> (Mat, Vec<u32>) {
        let t_out = self.out_len(x.rows).expect("pool input shorter than kernel");
        let c = x.cols;
        let mut y = Mat::zeros(t_out, c);
        let mut arg = vec![0u32; t_out * c];
        for r in 0..t_out {
            for ch in 0..c {
                let mut best = r * self.stride * c + ch;
                for i in 1..self.kernel {
                    let idx = (r * self.stride + i) * c + ch;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                y.data[r * c + ch] = x.data[best];
                arg[r * c + ch] = best as u32;
            }
        }
        (y, arg)
    }

    pub fn backward(t_in: usize, c: usize, arg: &[u32], dy: &Mat) -> Mat {
        let mut dx = Mat::zeros(t_in, c);
        for (g, &a) in dy.data.iter().zip(arg) {
            dx.data[a as usize] += g;
        }
        dx
    }
}

pub fn relu_inplace(x: &mut Mat) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Mat, dy: &Mat) -> Mat {
    let data = out.data.iter().zip(&dy.data).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect();
    Mat::from_vec(dy.rows, dy.cols, data)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout mask: kept entries scaled by `1/(1-p)`.
pub fn dropout_mask(rng: &mut impl Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Layer normalization over channels at each time step.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), &[channels], vec![1.0; channels]);
        let beta = ps.add(format!("{name}.beta"), &[channels], vec![0.0; channels]);
        LayerNorm { gamma, beta, channels, eps: 1e-5 }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Mat) -> (Mat, LayerNormCache) {
        let c = self.channels;
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut xhat = Mat::zeros(x.rows, c);
        let mut y = Mat::zeros(x.rows, c);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for ch in 0..c {
                let h = (row[ch] - mean) * is;
                xhat.data[r * c + ch] = h;
                y.data[r * c + ch] = h * gamma[ch] + beta[ch];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &ParamSet, cache: &LayerNormCache, dy: &Mat, grads: &mut ParamSet) -> Mat {
        let c = self.channels;
        let n = c as f64;
        let gamma = ps.get(self.gamma).to_vec();
        {
            let dg = grads.get_mut(self.gamma);
            for r in 0..dy.rows {
                for ch in 0..c {
                    dg[ch] += dy.data[r * c + ch] * cache.xhat.data[r * c + ch];
                }
            }
        }
        {
            let db = grads.get_mut(self.beta);
            for r in 0..dy.rows {
                for (g, v) in db.iter_mut().zip(dy.row(r)) {
                    *g += v;
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows, c);
        let mut dxhat = vec![0.0; c];
        for r in 0..dy.rows {
            let xh = cache.xhat.row(r);
            let mut sum = 0.0;
            let mut sum_x = 0.0;
            for ch in 0..c {
                dxhat[ch] = dy.data[r * c + ch] * gamma[ch];
                sum += dxhat[ch];
                sum_x += dxhat[ch] * xh[ch];
            }
            let is = cache.inv_std[r];
            for ch in 0..c {
                dx.data[r * c + ch] = is / n * (n * dxhat[ch] - sum - xh[ch] * sum_x);
            }
        }
        dx
    }
}
