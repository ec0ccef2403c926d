//! Distance -> similarity -> pooled scores -> stage logits.
//!
//! The waveform estimator max-pools similarities over patches (is the wave
//! present anywhere?), the proportion estimator mean-pools them (how much of
//! the window looks like it?). Each path is batch-normalized and rectified,
//! the two are concatenated into a `2M` score vector, and a linear layer maps
//! scores to five stage logits. Logits go through a sigmoid for the reported
//! activations; for the training loss the activations are renormalized into a
//! distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_STAGES;
use crate::layers::{sigmoid, Linear};
use crate::sensing::DistanceMap;
use crate::tensor::{ParamId, ParamSet};

pub const DEFAULT_EPS_SIM: f64 = 1e-4;
/// Variance floor of the score normalizations. Pooled similarities of
/// prototypes far from the data vary by ~1e-7, so the usual 1e-5 would
/// swamp the batch variance and flatten every score.
pub const SCORE_NORM_EPS: f64 = 1e-12;

#[inline]
pub fn similarity_value(dist: f64, eps: f64) -> f64 {
    ((dist + 1.0) / (dist + eps)).ln()
}

/// d similarity / d dist.
#[inline]
pub fn similarity_slope(dist: f64, eps: f64) -> f64 {
    1.0 / (dist + 1.0) - 1.0 / (dist + eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub num_prototypes: usize,
    pub num_patches: usize,
    pub values: Vec<f64>,
    pub eps: f64,
}

impl SimilarityMap {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.num_patches..(j + 1) * self.num_patches]
    }
}

pub fn similarity(d: &DistanceMap, eps: f64) -> SimilarityMap {
    SimilarityMap {
        num_prototypes: d.num_prototypes,
        num_patches: d.num_patches,
        values: d.values.iter().map(|&v| similarity_value(v, eps)).collect(),
        eps,
    }
}

/// Per prototype `(argmax patch, max similarity)`; first index wins ties.
pub fn max_pool(sim: &SimilarityMap) -> Vec<(usize, f64)> {
    (0..sim.num_prototypes)
        .map(|j| {
            sim.row(j)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (p, &v)| if v > best.1 { (p, v) } else { best })
        })
        .collect()
}

pub fn mean_pool(sim: &SimilarityMap) -> Vec<f64> {
    (0..sim.num_prototypes)
        .map(|j| sim.row(j).iter().sum::<f64>() / sim.num_patches as f64)
        .collect()
}

/// Batch normalization over a batch of feature vectors.
#[derive(Clone, Debug)]
pub struct ScoreNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub struct ScoreNormCache {
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
}

/// Batch statistics from a training-mode pass, applied to the running
/// estimates only when the optimizer step is committed.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

impl BatchStats {
    /// Mean and unbiased variance per column of `rows`.
    pub fn of(rows: &[Vec<f64>]) -> Self {
        let width = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let den = if rows.len() > 1 { n - 1.0 } else { 1.0 };
        let mut unbiased_var = vec![0.0; width];
        for row in rows {
            for i in 0..width {
                unbiased_var[i] += (row[i] - mean[i]).powi(2) / den;
            }
        }
        BatchStats { mean, unbiased_var }
    }
}

impl ScoreNorm {
    pub fn new(ps: &mut ParamSet, buffers: &mut ParamSet, name: &str, features: usize) -> Self {
        ScoreNorm {
            gamma: ps.add(format!("{name}.gamma"), &[features], vec![1.0; features]),
            beta: ps.add(format!("{name}.beta"), &[features], vec![0.0; features]),
            running_mean: buffers.add(format!("{name}.running_mean"), &[features], vec![0.0; features]),
            running_var: buffers.add(format!("{name}.running_var"), &[features], vec![1.0; features]),
            features,
            eps: SCORE_NORM_EPS,
            momentum: 0.1,
        }
    }

    pub fn forward_eval(&self, ps: &ParamSet, buffers: &ParamSet, x: &[f64]) -> Vec<f64> {
        let (g, b) = (ps.get(self.gamma), ps.get(self.beta));
        let (m, v) = (buffers.get(self.running_mean), buffers.get(self.running_var));
        (0..self.features).map(|i| (x[i] - m[i]) / (v[i] + self.eps).sqrt() * g[i] + b[i]).collect()
    }

    pub fn forward_train(&self, ps: &ParamSet, x: &[Vec<f64>]) -> (Vec<Vec<f64>>, ScoreNormCache, BatchStats) {
        let n = x.len() as f64;
        let (g, b) = (ps.get(self.gamma), ps.get(self.beta));
        let mut mean = vec![0.0; self.features];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.features];
        for row in x {
            for i in 0..self.features {
                var[i] += (row[i] - mean[i]).powi(2) / n;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat: Vec<Vec<f64>> = x
            .iter()
            .map(|row| (0..self.features).map(|i| (row[i] - mean[i]) * inv_std[i]).collect())
            .collect();
        let y = xhat.iter().map(|h| (0..self.features).map(|i| h[i] * g[i] + b[i]).collect()).collect();
        let unbiased = if x.len() > 1 { var.iter().map(|v| v * n / (n - 1.0)).collect() } else { var.clone() };
        (y, ScoreNormCache { xhat, inv_std }, BatchStats { mean, unbiased_var: unbiased })
    }

    pub fn backward_train(&self, ps: &ParamSet, cache: &ScoreNormCache, dy: &[Vec<f64>], grads: &mut ParamSet) -> Vec<Vec<f64>> {
        let n = dy.len() as f64;
        let g = ps.get(self.gamma).to_vec();
        let mut dgamma = vec![0.0; self.features];
        let mut dbeta = vec![0.0; self.features];
        let mut sum_dxhat = vec![0.0; self.features];
        let mut sum_dxhat_xhat = vec![0.0; self.features];
        for (row, h) in dy.iter().zip(&cache.xhat) {
            for i in 0..self.features {
                dgamma[i] += row[i] * h[i];
                dbeta[i] += row[i];
                let dxh = row[i] * g[i];
                sum_dxhat[i] += dxh;
                sum_dxhat_xhat[i] += dxh * h[i];
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += b;
        }
        dy.iter()
            .zip(&cache.xhat)
            .map(|(row, h)| {
                (0..self.features)
                    .map(|i| cache.inv_std[i] / n * (n * row[i] * g[i] - sum_dxhat[i] - h[i] * sum_dxhat_xhat[i]))
                    .collect()
            })
            .collect()
    }

    /// Overwrite the running estimates, e.g. with whole-population statistics.
    pub fn set_running(&self, buffers: &mut ParamSet, stats: &BatchStats) {
        buffers.get_mut(self.running_mean).copy_from_slice(&stats.mean);
        buffers.get_mut(self.running_var).copy_from_slice(&stats.unbiased_var);
    }

    pub fn update_running(&self, buffers: &mut ParamSet, stats: &BatchStats) {
        let mom = self.momentum;
        for (r, m) in buffers.get_mut(self.running_mean).iter_mut().zip(&stats.mean) {
            *r = (1.0 - mom) * *r + mom * m;
        }
        for (r, v) in buffers.get_mut(self.running_var).iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - mom) * *r + mom * v;
        }
    }
}

/// Which normalization a score path applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Frozen running statistics.
    Eval,
    /// Skip normalization; used to inspect raw pooled values.
    Identity,
}

/// Decision block: two score normalizations plus the `2M x 5` linear head.
#[derive(Clone, Debug)]
pub struct DecisionHead {
    pub num_prototypes: usize,
    pub fc: Linear,
    pub norm_w: ScoreNorm,
    pub norm_p: ScoreNorm,
}

impl DecisionHead {
    pub fn new(ps: &mut ParamSet, buffers: &mut ParamSet, num_prototypes: usize, rng: &mut impl Rng) -> Self {
        DecisionHead {
            num_prototypes,
            norm_w: ScoreNorm::new(ps, buffers, "head.norm_w", num_prototypes),
            norm_p: ScoreNorm::new(ps, buffers, "head.norm_p", num_prototypes),
            fc: Linear::new(ps, "head.fc", 2 * num_prototypes, NUM_STAGES, rng),
        }
    }

    pub fn weights<'a>(&self, ps: &'a ParamSet) -> &'a [f64] {
        ps.get(self.fc.w)
    }

    pub fn bias<'a>(&self, ps: &'a ParamSet) -> &'a [f64] {
        ps.get(self.fc.b)
    }
}

fn relu_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn wscore(sim: &SimilarityMap, head: &DecisionHead, ps: &ParamSet, buffers: &ParamSet, mode: NormMode) -> Vec<f64> {
    let pooled: Vec<f64> = max_pool(sim).into_iter().map(|(_, v)| v).collect();
    match mode {
        NormMode::Eval => relu_vec(head.norm_w.forward_eval(ps, buffers, &pooled)),
        NormMode::Identity => relu_vec(pooled),
    }
}

pub fn pscore(sim: &SimilarityMap, head: &DecisionHead, ps: &ParamSet, buffers: &ParamSet, mode: NormMode) -> Vec<f64> {
    let pooled = mean_pool(sim);
    match mode {
        NormMode::Eval => relu_vec(head.norm_p.forward_eval(ps, buffers, &pooled)),
        NormMode::Identity => relu_vec(pooled),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePrediction {
    pub logits: Vec<f64>,
    pub activations: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: u8,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

impl StagePrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let activations: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let total: f64 = activations.iter().sum();
        let probabilities = activations.iter().map(|a| a / total).collect();
        let predicted = argmax(&logits) as u8;
        StagePrediction { logits, activations, probabilities, predicted }
    }
}

/// Linear head on a score vector, then sigmoid.
pub fn decide(score: &[f64], head: &DecisionHead, ps: &ParamSet) -> StagePrediction {
    assert_eq!(score.len(), 2 * head.num_prototypes, "score length must be 2M");
    StagePrediction::from_logits(head.fc.forward(ps, score))
}

/// Entry `(i, c)` = `score[i] * W[i][c]`: how much score `i` pushes the logit of stage `c`.
pub fn contribution_matrix(score: &[f64], head: &DecisionHead, ps: &ParamSet) -> Vec<Vec<f64>> {
    let w = head.weights(ps);
    let n_out = head.fc.n_out;
    score.iter().enumerate().map(|(i, s)| (0..n_out).map(|c| s * w[i * n_out + c]).collect()).collect()
}
