//! Feature extraction: raw window -> `K x C` latent map.
//!
//! Pipeline: two-branch multi-resolution CNN (conv -> ReLU -> max-pool per
//! branch, concatenated along time) -> dropout -> adaptive feature
//! recalibration (1x1 convs with a squeeze-and-excitation gate and a 1x1
//! residual path) -> `B` stacked residual blocks with layer norm and
//! depthwise-separable units. All convolutions inside the stacked blocks keep
//! the time length, so residual additions line up.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{
    dropout_mask, relu_backward, relu_inplace, sigmoid, Conv1d, ConvCache, DepthwiseConv1d, LayerNorm,
    LayerNormCache, Linear, MaxPool1d,
};
use crate::tensor::{Mat, ParamSet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrcnnConfig {
    pub small_branch: BranchConfig,
    pub large_branch: BranchConfig,
    /// Dropout probability applied to the fused branch output in training mode.
    pub dropout: f64,
}

impl Default for MrcnnConfig {
    fn default() -> Self {
        MrcnnConfig {
            small_branch: BranchConfig { filters: 64, kernel: 50, stride: 6, pool_kernel: 4, pool_stride: 4 },
            large_branch: BranchConfig { filters: 64, kernel: 400, stride: 50, pool_kernel: 4, pool_stride: 4 },
            dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfrConfig {
    pub reduce_channels: usize,
    pub se_reduction: usize,
}

impl Default for AfrConfig {
    fn default() -> Self {
        AfrConfig { reduce_channels: 64, se_reduction: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackedCnnConfig {
    pub num_blocks: usize,
    pub units_per_block: usize,
    pub block_kernel: usize,
    pub unit_kernel: usize,
    pub depthwise_kernel: usize,
    /// Channel multiplier of the standard conv inside each unit.
    pub expansion: usize,
}

impl Default for StackedCnnConfig {
    fn default() -> Self {
        StackedCnnConfig {
            num_blocks: 2,
            units_per_block: 2,
            block_kernel: 3,
            unit_kernel: 3,
            depthwise_kernel: 7,
            expansion: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub mrcnn: MrcnnConfig,
    pub afr: AfrConfig,
    pub stacked: StackedCnnConfig,
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.mrcnn;
        if m.small_branch.filters != m.large_branch.filters {
            return Err(Error::Config("MRCNN branches must end with the same channel count".into()));
        }
        if m.small_branch.kernel == m.large_branch.kernel {
            return Err(Error::Config("MRCNN branches need distinct kernel sizes".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", m.dropout)));
        }
        let a = &self.afr;
        if a.se_reduction == 0 || a.reduce_channels % a.se_reduction != 0 {
            return Err(Error::Config(format!(
                "reduce_channels {} must be divisible by se_reduction {}",
                a.reduce_channels, a.se_reduction
            )));
        }
        let s = &self.stacked;
        if s.num_blocks == 0 || s.units_per_block == 0 || s.expansion == 0 {
            return Err(Error::Config("stacked CNN needs B >= 1, R >= 1, expansion >= 1".into()));
        }
        for k in [s.block_kernel, s.unit_kernel, s.depthwise_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("stacked CNN kernels must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// `(K, C)` of the feature map for an input of `n_samples`.
    pub fn output_shape(&self, n_samples: usize) -> Result<(usize, usize)> {
        let branch_len = |b: &BranchConfig| -> Option<usize> {
            let t = (n_samples >= b.kernel).then(|| (n_samples - b.kernel) / b.stride + 1)?;
            (t >= b.pool_kernel).then(|| (t - b.pool_kernel) / b.pool_stride + 1)
        };
        let small = branch_len(&self.mrcnn.small_branch);
        let large = branch_len(&self.mrcnn.large_branch);
        match (small, large) {
            (Some(a), Some(b)) => Ok((a + b, self.afr.reduce_channels)),
            _ => Err(Error::Shape(format!("input of {n_samples} samples is too short for the MRCNN branches"))),
        }
    }
}

struct Branch {
    conv: Conv1d,
    pool: MaxPool1d,
}

struct Unit {
    standard: Conv1d,
    depthwise: DepthwiseConv1d,
    pointwise: Conv1d,
}

struct Block {
    conv: Conv1d,
    norm: LayerNorm,
    units: Vec<Unit>,
}

pub struct FeatureExtractor {
    pub cfg: FeatureConfig,
    small: Branch,
    large: Branch,
    afr_residual: Conv1d,
    afr_conv1: Conv1d,
    afr_conv2: Conv1d,
    se_fc1: Linear,
    se_fc2: Linear,
    blocks: Vec<Block>,
}

struct BranchCache {
    conv: ConvCache,
    relu_out: Mat,
    pool_arg: Vec<u32>,
}

pub struct AfrCache {
    input: Mat,
    res: ConvCache,
    c1: ConvCache,
    h1: Mat,
    c2: ConvCache,
    f: Mat,
    z: Vec<f64>,
    e: Vec<f64>,
    gate: Vec<f64>,
}

struct UnitCache {
    standard: ConvCache,
    a: Mat,
    d: Mat,
    pointwise: ConvCache,
}

struct BlockCache {
    conv: ConvCache,
    norm: LayerNormCache,
    units: Vec<UnitCache>,
}

pub struct StackedCache {
    blocks: Vec<BlockCache>,
}

/// Everything `FeatureExtractor::backward` needs from the forward pass.
pub struct FeatureCache {
    small: BranchCache,
    large: BranchCache,
    small_len: usize,
    dropout: Option<Vec<f64>>,
    afr: AfrCache,
    stacked: StackedCache,
}

impl FeatureExtractor {
    pub fn new(ps: &mut ParamSet, cfg: &FeatureConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let sb = &cfg.mrcnn.small_branch;
        let lb = &cfg.mrcnn.large_branch;
        let small = Branch {
            conv: Conv1d::new(ps, "mrcnn.small.conv", 1, sb.filters, sb.kernel, sb.stride, 0, rng),
            pool: MaxPool1d { kernel: sb.pool_kernel, stride: sb.pool_stride },
        };
        let large = Branch {
            conv: Conv1d::new(ps, "mrcnn.large.conv", 1, lb.filters, lb.kernel, lb.stride, 0, rng),
            pool: MaxPool1d { kernel: lb.pool_kernel, stride: lb.pool_stride },
        };
        let c_in = sb.filters;
        let c = cfg.afr.reduce_channels;
        let afr_residual = Conv1d::new(ps, "afr.residual", c_in, c, 1, 1, 0, rng);
        let afr_conv1 = Conv1d::new(ps, "afr.conv1", c_in, c, 1, 1, 0, rng);
        let afr_conv2 = Conv1d::new(ps, "afr.conv2", c, c, 1, 1, 0, rng);
        let hidden = c / cfg.afr.se_reduction;
        let se_fc1 = Linear::new(ps, "afr.se.fc1", c, hidden, rng);
        let se_fc2 = Linear::new(ps, "afr.se.fc2", hidden, c, rng);
        let s = &cfg.stacked;
        let blocks = (0..s.num_blocks)
            .map(|b| Block {
                conv: Conv1d::same(ps, &format!("stack{b}.conv"), c, c, s.block_kernel, rng),
                norm: LayerNorm::new(ps, &format!("stack{b}.norm"), c),
                units: (0..s.units_per_block)
                    .map(|u| {
                        let e = c * s.expansion;
                        Unit {
                            standard: Conv1d::same(ps, &format!("stack{b}.unit{u}.conv"), c, e, s.unit_kernel, rng),
                            depthwise: DepthwiseConv1d::new(ps, &format!("stack{b}.unit{u}.depthwise"), e, s.depthwise_kernel, rng),
                            pointwise: Conv1d::new(ps, &format!("stack{b}.unit{u}.pointwise"), e, c, 1, 1, 0, rng),
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(FeatureExtractor { cfg: cfg.clone(), small, large, afr_residual, afr_conv1, afr_conv2, se_fc1, se_fc2, blocks })
    }

    fn branch_forward(branch: &Branch, ps: &ParamSet, x: &Mat) -> (Mat, BranchCache) {
        let (mut h, conv) = branch.conv.forward(ps, x);
        relu_inplace(&mut h);
        let (y, pool_arg) = branch.pool.forward(&h);
        (y, BranchCache { conv, relu_out: h, pool_arg })
    }

    fn branch_backward(branch: &Branch, ps: &ParamSet, cache: &BranchCache, dy: &Mat, grads: &mut ParamSet) -> Mat {
        let dh = MaxPool1d::backward(cache.relu_out.rows, cache.relu_out.cols, &cache.pool_arg, dy);
        let dh = relu_backward(&cache.relu_out, &dh);
        branch.conv.backward(ps, &cache.conv, &dh, grads)
    }

    /// Multi-resolution branches fused along the time axis (small branch first).
    pub fn mrcnn_forward(&self, ps: &ParamSet, signal: &[f64]) -> Result<Mat> {
        self.check_input(signal.len())?;
        let x = Mat::column(signal);
        let (a, _) = Self::branch_forward(&self.small, ps, &x);
        let (b, _) = Self::branch_forward(&self.large, ps, &x);
        Ok(concat_time(&a, &b))
    }

    fn check_input(&self, n: usize) -> Result<()> {
        self.cfg.output_shape(n).map(|_| ())
    }

    pub fn afr_forward(&self, ps: &ParamSet, x: &Mat) -> Result<(Mat, AfrCache)> {
        if x.cols != self.afr_conv1.c_in {
            return Err(Error::Shape(format!("AFR expects {} channels, got {}", self.afr_conv1.c_in, x.cols)));
        }
        let (r, res) = self.afr_residual.forward(ps, x);
        let (mut h1, c1) = self.afr_conv1.forward(ps, x);
        relu_inplace(&mut h1);
        let (f, c2) = self.afr_conv2.forward(ps, &h1);
        let z = column_mean(&f);
        let mut e = self.se_fc1.forward(ps, &z);
        e.iter_mut().for_each(|v| *v = v.max(0.0));
        let gate: Vec<f64> = self.se_fc2.forward(ps, &e).into_iter().map(sigmoid).collect();
        let out = afr_combine(&r, &f, &gate);
        Ok((out, AfrCache { input: x.clone(), res, c1, h1, c2, f, z, e, gate }))
    }

    /// AFR with the excitation gate replaced by a constant.
    pub fn afr_forward_forced(&self, ps: &ParamSet, x: &Mat, gate_value: f64) -> Mat {
        let (r, _) = self.afr_residual.forward(ps, x);
        let (mut h1, _) = self.afr_conv1.forward(ps, x);
        relu_inplace(&mut h1);
        let (f, _) = self.afr_conv2.forward(ps, &h1);
        afr_combine(&r, &f, &vec![gate_value; f.cols])
    }

    /// Gate of the SE block for a given AFR input, for inspection.
    pub fn se_gate(&self, ps: &ParamSet, x: &Mat) -> Result<Vec<f64>> {
        Ok(self.afr_forward(ps, x)?.1.gate)
    }

    pub fn afr_backward(&self, ps: &ParamSet, cache: &AfrCache, dout: &Mat, grads: &mut ParamSet) -> Mat {
        let (t, c) = cache.f.shape();
        let mut dgate = vec![0.0; c];
        let mut df = Mat::zeros(t, c);
        for r in 0..t {
            for ch in 0..c {
                let g = dout.data[r * c + ch];
                dgate[ch] += g * cache.f.data[r * c + ch];
                df.data[r * c + ch] = g * cache.gate[ch];
            }
        }
        let dpre2: Vec<f64> = dgate.iter().zip(&cache.gate).map(|(d, g)| d * g * (1.0 - g)).collect();
        let mut de = self.se_fc2.backward(ps, &cache.e, &dpre2, grads);
        for (d, e) in de.iter_mut().zip(&cache.e) {
            if *e <= 0.0 {
                *d = 0.0;
            }
        }
        let dz = self.se_fc1.backward(ps, &cache.z, &de, grads);
        for r in 0..t {
            for ch in 0..c {
                df.data[r * c + ch] += dz[ch] / t as f64;
            }
        }
        let dh1 = self.afr_conv2.backward(ps, &cache.c2, &df, grads);
        let dh1 = relu_backward(&cache.h1, &dh1);
        let mut dx = self.afr_conv1.backward(ps, &cache.c1, &dh1, grads);
        dx.add_assign(&self.afr_residual.backward(ps, &cache.res, dout, grads));
        debug_assert_eq!(dx.shape(), cache.input.shape());
        dx
    }

    pub fn stacked_forward(&self, ps: &ParamSet, x: &Mat) -> Result<(Mat, StackedCache)> {
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite input to stacked CNN".into()));
        }
        if x.cols != self.cfg.afr.reduce_channels {
            return Err(Error::Shape(format!("stacked CNN expects {} channels, got {}", self.cfg.afr.reduce_channels, x.cols)));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (mut y, conv) = block.conv.forward(ps, &cur);
            y.add_assign(&cur);
            let (mut u, norm) = block.norm.forward(ps, &y);
            let mut units = Vec::with_capacity(block.units.len());
            for unit in &block.units {
                let (mut a, standard) = unit.standard.forward(ps, &u);
                relu_inplace(&mut a);
                let mut d = unit.depthwise.forward(ps, &a);
                relu_inplace(&mut d);
                let (p, pointwise) = unit.pointwise.forward(ps, &d);
                u.add_assign(&p);
                units.push(UnitCache { standard, a, d, pointwise });
            }
            caches.push(BlockCache { conv, norm, units });
            cur = u;
        }
        Ok((cur, StackedCache { blocks: caches }))
    }

    pub fn stacked_backward(&self, ps: &ParamSet, cache: &StackedCache, dout: &Mat, grads: &mut ParamSet) -> Mat {
        let mut g = dout.clone();
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            for (unit, uc) in block.units.iter().zip(&bc.units).rev() {
                let dd = unit.pointwise.backward(ps, &uc.pointwise, &g, grads);
                let dd = relu_backward(&uc.d, &dd);
                let da = unit.depthwise.backward(ps, &uc.a, &dd, grads);
                let da = relu_backward(&uc.a, &da);
                g.add_assign(&unit.standard.backward(ps, &uc.standard, &da, grads));
            }
            let dy = block.norm.backward(ps, &bc.norm, &g, grads);
            let mut dx = block.conv.backward(ps, &bc.conv, &dy, grads);
            dx.add_assign(&dy);
            g = dx;
        }
        g
    }

    /// Full extraction. `dropout_rng = None` is evaluation mode.
    pub fn forward<R: Rng>(&self, ps: &ParamSet, signal: &[f64], dropout_rng: Option<&mut R>) -> Result<(Mat, FeatureCache)> {
        self.check_input(signal.len())?;
        let x = Mat::column(signal);
        let (a, small) = Self::branch_forward(&self.small, ps, &x);
        let (b, large) = Self::branch_forward(&self.large, ps, &x);
        let small_len = a.rows;
        let mut fused = concat_time(&a, &b);
        let p = self.cfg.mrcnn.dropout;
        let dropout = match dropout_rng {
            Some(rng) if p > 0.0 => {
                let mask = dropout_mask(rng, fused.data.len(), p);
                fused.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                Some(mask)
            }
            _ => None,
        };
        let (h, afr) = self.afr_forward(ps, &fused)?;
        let (s, stacked) = self.stacked_forward(ps, &h)?;
        Ok((s, FeatureCache { small, large, small_len, dropout, afr, stacked }))
    }

    pub fn forward_eval(&self, ps: &ParamSet, signal: &[f64]) -> Result<Mat> {
        self.forward::<rand_chacha::ChaCha8Rng>(ps, signal, None).map(|(s, _)| s)
    }

    /// Backpropagate `ds` (gradient w.r.t. the feature map) into parameter grads.
    pub fn backward(&self, ps: &ParamSet, cache: &FeatureCache, ds: &Mat, grads: &mut ParamSet) {
        let dh = self.stacked_backward(ps, &cache.stacked, ds, grads);
        let mut dfused = self.afr_backward(ps, &cache.afr, &dh, grads);
        if let Some(mask) = &cache.dropout {
            dfused.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        let c = dfused.cols;
        let split = cache.small_len * c;
        let da = Mat::from_vec(cache.small_len, c, dfused.data[..split].to_vec());
        let db = Mat::from_vec(dfused.rows - cache.small_len, c, dfused.data[split..].to_vec());
        Self::branch_backward(&self.small, ps, &cache.small, &da, grads);
        Self::branch_backward(&self.large, ps, &cache.large, &db, grads);
    }
}

fn concat_time(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.cols);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Mat::from_vec(a.rows + b.rows, a.cols, data)
}

fn column_mean(x: &Mat) -> Vec<f64> {
    let mut z = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (acc, v) in z.iter_mut().zip(x.row(r)) {
            *acc += v;
        }
    }
    z.iter_mut().for_each(|v| *v /= x.rows as f64);
    z
}

/// `residual + features * gate`, gate broadcast over time.
pub fn afr_combine(residual: &Mat, features: &Mat, gate: &[f64]) -> Mat {
    let mut out = residual.clone();
    let c = out.cols;
    for r in 0..out.rows {
        for ch in 0..c {
            out.data[r * c + ch] += features.data[r * c + ch] * gate[ch];
        }
    }
    out
}
