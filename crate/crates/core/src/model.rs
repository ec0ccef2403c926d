//! The full network: feature extractor, prototype bank and decision head,
//! with a batched training pass (loss and gradients of every term) and an
//! evaluation pass that keeps every intermediate for explanation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, EpochWindow};
use crate::decision::{
    argmax, max_pool, mean_pool, similarity, similarity_slope, BatchStats, DecisionHead, SimilarityMap,
    StagePrediction, DEFAULT_EPS_SIM,
};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::layers::sigmoid;
use crate::losses::{
    class_loss, class_loss_logit_grad, diversity_grad, diversity_loss, l1_grad, l1_loss, total_loss, LossBreakdown,
    LossTerms, LossWeights, DEFAULT_EPS_DIV,
};
use crate::sensing::{distance_map, project_prototypes, DistanceMap, FeatureEntry, PrototypeBank, PrototypeMeta};
use crate::tensor::{Mat, ParamId, ParamSet};
use crate::{Error, Result};

pub const PROTOTYPES: &str = "prototypes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub data: DatasetConfig,
    pub features: FeatureConfig,
    pub num_prototypes: usize,
    pub patch_len: usize,
    pub eps_sim: f64,
    pub eps_div: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            data: DatasetConfig::default(),
            features: FeatureConfig::default(),
            num_prototypes: 8,
            patch_len: 1,
            eps_sim: DEFAULT_EPS_SIM,
            eps_div: DEFAULT_EPS_DIV,
        }
    }
}

impl ModelConfig {
    /// `(K, C)` of the feature map for this input contract.
    pub fn feature_shape(&self) -> Result<(usize, usize)> {
        self.features.output_shape(self.data.window_samples())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.features.validate()?;
        let (k, _) = self.feature_shape()?;
        if self.num_prototypes < self.data.num_classes {
            return Err(Error::Config(format!(
                "need at least {} prototypes, got {}",
                self.data.num_classes, self.num_prototypes
            )));
        }
        if self.patch_len == 0 || self.patch_len > k {
            return Err(Error::Config(format!("patch length {} not in 1..={k}", self.patch_len)));
        }
        for (name, e) in [("eps_sim", self.eps_sim), ("eps_div", self.eps_div)] {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {e}")));
            }
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    /// Batch-norm running statistics; not trained by gradient.
    pub buffers: ParamSet,
    pub features: FeatureExtractor,
    pub prototypes: ParamId,
    pub head: DecisionHead,
    pub proto_meta: Vec<PrototypeMeta>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        let mut m = Model::new(&self.cfg, 0).expect("config was valid");
        m.params.load_from(&self.params).expect("same layout");
        m.buffers.load_from(&self.buffers).expect("same layout");
        m.proto_meta = self.proto_meta.clone();
        m
    }
}

/// Sensing and scoring intermediates of one window.
#[derive(Clone, Debug)]
pub struct Sensed {
    pub dist: DistanceMap,
    pub sim: SimilarityMap,
    pub max_arg: Vec<usize>,
    pub max_val: Vec<f64>,
    pub mean_val: Vec<f64>,
}

/// Everything an evaluation pass computes for one window.
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Mat,
    pub sensed: Sensed,
    /// `[WScore, PScore]`, length `2M`.
    pub score: Vec<f64>,
    pub prediction: StagePrediction,
}

impl Inference {
    pub fn wscore(&self) -> &[f64] {
        &self.score[..self.score.len() / 2]
    }

    pub fn pscore(&self) -> &[f64] {
        &self.score[self.score.len() / 2..]
    }
}

/// Loss, gradients and side products of one training pass.
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub grads: ParamSet,
    /// Gradient w.r.t. each input feature map.
    pub feature_grads: Vec<Mat>,
    /// Batch statistics of the waveform and proportion normalizations.
    pub norm_stats: (BatchStats, BatchStats),
    pub predictions: Vec<u8>,
    pub clamped: usize,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (_, c) = cfg.feature_shape()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let features = FeatureExtractor::new(&mut params, &cfg.features, &mut rng)?;
        let m = cfg.num_prototypes;
        let init: Vec<f64> = (0..m * cfg.patch_len * c).map(|_| rng.random::<f64>()).collect();
        let prototypes = params.add(PROTOTYPES, &[m, cfg.patch_len, c], init);
        let head = DecisionHead::new(&mut params, &mut buffers, m, &mut rng);
        Ok(Model {
            cfg: cfg.clone(),
            params,
            buffers,
            features,
            prototypes,
            head,
            proto_meta: vec![PrototypeMeta::default(); m],
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.cfg.num_prototypes
    }

    pub fn bank(&self) -> PrototypeBank {
        let (_, c) = self.cfg.feature_shape().expect("validated");
        let mut bank = PrototypeBank::new(
            self.cfg.num_prototypes,
            self.cfg.patch_len,
            c,
            self.params.get(self.prototypes).to_vec(),
        )
        .expect("prototype tensor has bank layout");
        bank.meta = self.proto_meta.clone();
        bank
    }

    pub fn set_bank(&mut self, bank: &PrototypeBank) {
        self.params.get_mut(self.prototypes).copy_from_slice(&bank.values);
        self.proto_meta = bank.meta.clone();
    }

    pub fn head_weights(&self) -> &[f64] {
        self.head.weights(&self.params)
    }

    pub fn extract(&self, signal: &[f64]) -> Result<Mat> {
        self.features.forward_eval(&self.params, signal)
    }

    pub fn sense(&self, s: &Mat, bank: &PrototypeBank) -> Result<Sensed> {
        let dist = distance_map(s, bank)?;
        let sim = similarity(&dist, self.cfg.eps_sim);
        let (max_arg, max_val) = max_pool(&sim).into_iter().unzip();
        let mean_val = mean_pool(&sim);
        Ok(Sensed { dist, sim, max_arg, max_val, mean_val })
    }

    /// Evaluation-mode scores and prediction from a feature map.
    pub fn infer_features(&self, s: Mat) -> Result<Inference> {
        let sensed = self.sense(&s, &self.bank())?;
        let h = &self.head;
        let w = h.norm_w.forward_eval(&self.params, &self.buffers, &sensed.max_val);
        let p = h.norm_p.forward_eval(&self.params, &self.buffers, &sensed.mean_val);
        let score: Vec<f64> = w.into_iter().chain(p).map(|v| v.max(0.0)).collect();
        let prediction = StagePrediction::from_logits(h.fc.forward(&self.params, &score));
        Ok(Inference { features: s, sensed, score, prediction })
    }

    pub fn infer(&self, signal: &[f64]) -> Result<Inference> {
        self.infer_features(self.extract(signal)?)
    }

    pub fn predict(&self, signal: &[f64]) -> Result<StagePrediction> {
        self.infer(signal).map(|i| i.prediction)
    }

    /// Eval-mode feature maps of `windows`, for projection and nearest-patch search.
    pub fn feature_entries(&self, windows: &[EpochWindow]) -> Result<Vec<FeatureEntry>> {
        windows
            .iter()
            .map(|w| Ok(FeatureEntry { window: w.window.clone(), features: self.extract(w.signal())? }))
            .collect()
    }

    /// Replace each prototype by its nearest patch among `entries`.
    pub fn project(&mut self, entries: &[FeatureEntry]) -> Result<()> {
        let projected = project_prototypes(&self.bank(), entries)?;
        self.set_bank(&projected);
        Ok(())
    }

    /// Reset the score normalizations' running statistics to the pooled
    /// similarity statistics of `entries` under the current bank. Projection
    /// moves prototypes onto real patches, which shifts the similarity
    /// distribution far from what the running averages tracked.
    pub fn recalibrate_norms(&mut self, entries: &[FeatureEntry]) -> Result<()> {
        if entries.len() < 2 {
            return Ok(());
        }
        let bank = self.bank();
        let mut maxes = Vec::with_capacity(entries.len());
        let mut means = Vec::with_capacity(entries.len());
        for e in entries {
            let s = self.sense(&e.features, &bank)?;
            maxes.push(s.max_val);
            means.push(s.mean_val);
        }
        self.head.norm_w.set_running(&mut self.buffers, &BatchStats::of(&maxes));
        self.head.norm_p.set_running(&mut self.buffers, &BatchStats::of(&means));
        Ok(())
    }

    pub fn apply_norm_stats(&mut self, stats: &(BatchStats, BatchStats)) {
        self.head.norm_w.update_running(&mut self.buffers, &stats.0);
        self.head.norm_p.update_running(&mut self.buffers, &stats.1);
    }

    /// Training-mode loss and gradients from precomputed feature maps.
    ///
    /// Score normalization uses batch statistics. R1/R2 minima range over
    /// the patches of `features` plus, for R1 only, the constant patches of
    /// `r1_pool` (which receive no gradient).
    pub fn head_step(
        &self,
        features: &[Mat],
        labels: &[u8],
        weights: &LossWeights,
        r1_pool: &[Mat],
    ) -> Result<StepResult> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Shape(format!("{n} feature maps for {} labels", labels.len())));
        }
        let bank = self.bank();
        let m = bank.num_prototypes;
        let ps = &self.params;
        let h = &self.head;
        let sensed: Vec<Sensed> = features.iter().map(|s| self.sense(s, &bank)).collect::<Result<_>>()?;

        let max_rows: Vec<Vec<f64>> = sensed.iter().map(|s| s.max_val.clone()).collect();
        let mean_rows: Vec<Vec<f64>> = sensed.iter().map(|s| s.mean_val.clone()).collect();
        let (nw, cache_w, stats_w) = h.norm_w.forward_train(ps, &max_rows);
        let (np, cache_p, stats_p) = h.norm_p.forward_train(ps, &mean_rows);
        let scores: Vec<Vec<f64>> = nw
            .iter()
            .zip(&np)
            .map(|(a, b)| a.iter().chain(b).map(|v| v.max(0.0)).collect())
            .collect();
        let logits: Vec<Vec<f64>> = scores.iter().map(|s| h.fc.forward(ps, s)).collect();
        let activations: Vec<Vec<f64>> = logits.iter().map(|z| z.iter().map(|&v| sigmoid(v)).collect()).collect();
        let probs: Vec<Vec<f64>> = activations
            .iter()
            .map(|a| {
                let s: f64 = a.iter().sum();
                a.iter().map(|v| v / s).collect()
            })
            .collect();
        let class = class_loss(&probs, labels)?;

        let mut grads = ps.zeros_like();

        // class term back to the scores
        let mut dscore = Vec::with_capacity(n);
        for i in 0..n {
            let dz: Vec<f64> = class_loss_logit_grad(&activations[i], labels[i] as usize)
                .into_iter()
                .map(|g| g * weights.class / n as f64)
                .collect();
            dscore.push(h.fc.backward(ps, &scores[i], &dz, &mut grads));
        }
        let l1 = l1_loss(h.weights(ps));
        if weights.l1 != 0.0 {
            for (g, s) in grads.get_mut(h.fc.w).iter_mut().zip(l1_grad(h.weights(ps))) {
                *g += weights.l1 * s;
            }
        }

        // through ReLU and the two normalizations
        let mut dnw = Vec::with_capacity(n);
        let mut dnp = Vec::with_capacity(n);
        for i in 0..n {
            let gate = |k: usize, v: f64| if scores[i][k] > 0.0 { v } else { 0.0 };
            dnw.push((0..m).map(|j| gate(j, dscore[i][j])).collect::<Vec<_>>());
            dnp.push((0..m).map(|j| gate(m + j, dscore[i][m + j])).collect::<Vec<_>>());
        }
        let dmax = h.norm_w.backward_train(ps, &cache_w, &dnw, &mut grads);
        let dmean = h.norm_p.backward_train(ps, &cache_p, &dnp, &mut grads);

        // pooling and similarity back to distances
        let mut ddist: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (i, s) in sensed.iter().enumerate() {
            let pn = s.dist.num_patches;
            let mut dd = vec![0.0; m * pn];
            for j in 0..m {
                let share = dmean[i][j] / pn as f64;
                for p in 0..pn {
                    let mut g = share;
                    if p == s.max_arg[j] {
                        g += dmax[i][j];
                    }
                    dd[j * pn + p] = g * similarity_slope(s.dist.values[j * pn + p], self.cfg.eps_sim);
                }
            }
            ddist.push(dd);
        }

        // cluster terms: minima over the batch patches
        let (r1, r2) = cluster_terms(&bank, &sensed, r1_pool, weights, &mut ddist)?;

        // distances back to prototypes and features
        let k1 = bank.patch_len;
        let size = bank.prototype_size();
        let mut dproto = vec![0.0; bank.values.len()];
        let mut feature_grads = Vec::with_capacity(n);
        for (i, s) in features.iter().enumerate() {
            let mut ds = Mat::zeros(s.rows, s.cols);
            let pn = s.rows - k1 + 1;
            for j in 0..m {
                let w = bank.prototype(j);
                for p in 0..pn {
                    let g = ddist[i][j * pn + p];
                    if g == 0.0 {
                        continue;
                    }
                    let base = p * s.cols;
                    for k in 0..size {
                        let diff = 2.0 * g * (s.data[base + k] - w[k]);
                        ds.data[base + k] += diff;
                        dproto[j * size + k] -= diff;
                    }
                }
            }
            feature_grads.push(ds);
        }
        let div = diversity_loss(&bank, self.cfg.eps_div)?;
        if weights.dist != 0.0 {
            for (g, d) in dproto.iter_mut().zip(diversity_grad(&bank, self.cfg.eps_div)?) {
                *g += weights.dist * d;
            }
        }
        grads.get_mut(self.prototypes).iter_mut().zip(&dproto).for_each(|(g, d)| *g += d);

        let breakdown = total_loss(&LossTerms { class: class.value, dist: div, r1, r2, l1 }, weights)?;
        let predictions = logits.iter().map(|z| argmax(z) as u8).collect();
        Ok(StepResult {
            breakdown,
            grads,
            feature_grads,
            norm_stats: (stats_w, stats_p),
            predictions,
            clamped: class.clamped,
        })
    }

    /// One full training pass over a mini-batch of raw signals.
    pub fn train_step(
        &self,
        signals: &[&[f64]],
        labels: &[u8],
        weights: &LossWeights,
        dropout_rng: &mut impl Rng,
        r1_pool: &[Mat],
    ) -> Result<StepResult> {
        let mut feats = Vec::with_capacity(signals.len());
        let mut caches = Vec::with_capacity(signals.len());
        for s in signals {
            let (f, c) = self.features.forward(&self.params, s, Some(&mut *dropout_rng))?;
            if !f.is_finite() {
                return Err(Error::Numeric("non-finite feature map".into()));
            }
            feats.push(f);
            caches.push(c);
        }
        let mut out = self.head_step(&feats, labels, weights, r1_pool)?;
        for (cache, ds) in caches.iter().zip(&out.feature_grads) {
            self.features.backward(&self.params, cache, ds, &mut out.grads);
        }
        Ok(out)
    }

    /// Evaluation-mode loss over a set of windows, with R1/R2 minima over
    /// all of their patches. Also returns each window's prediction.
    pub fn evaluate_loss(&self, windows: &[EpochWindow], weights: &LossWeights) -> Result<(LossBreakdown, Vec<StagePrediction>)> {
        if windows.is_empty() {
            return Err(Error::Validation("loss over an empty window set".into()));
        }
        let bank = self.bank();
        let m = bank.num_prototypes;
        let mut r1_min = vec![f64::INFINITY; m];
        let mut r2_sum = 0.0;
        let mut r2_count = 0usize;
        let mut probs = Vec::with_capacity(windows.len());
        let mut preds = Vec::with_capacity(windows.len());
        for w in windows {
            let inf = self.infer(w.signal())?;
            let d = &inf.sensed.dist;
            for (j, r) in r1_min.iter_mut().enumerate() {
                *r = r.min(d.row_min(j).1);
            }
            for p in 0..d.num_patches {
                r2_sum += (0..m).map(|j| d.values[j * d.num_patches + p]).fold(f64::INFINITY, f64::min);
                r2_count += 1;
            }
            probs.push(inf.prediction.probabilities.clone());
            preds.push(inf.prediction);
        }
        let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
        let terms = LossTerms {
            class: class_loss(&probs, &labels)?.value,
            dist: diversity_loss(&bank, self.cfg.eps_div)?,
            r1: r1_min.iter().sum::<f64>() / m as f64,
            r2: r2_sum / r2_count as f64,
            l1: l1_loss(self.head_weights()),
        };
        Ok((total_loss(&terms, weights)?, preds))
    }
}

/// R1 and R2 values, adding their weighted gradients into `ddist`.
fn cluster_terms(
    bank: &PrototypeBank,
    sensed: &[Sensed],
    r1_pool: &[Mat],
    weights: &LossWeights,
    ddist: &mut [Vec<f64>],
) -> Result<(f64, f64)> {
    let m = bank.num_prototypes;
    // R1: per prototype, the closest patch anywhere in the batch (first wins ties)
    let mut r1 = 0.0;
    let mut pool_min = vec![f64::INFINITY; m];
    for s in r1_pool {
        let d = distance_map(s, bank)?;
        for (j, v) in pool_min.iter_mut().enumerate() {
            *v = v.min(d.row_min(j).1);
        }
    }
    for j in 0..m {
        let mut best = (usize::MAX, 0, f64::INFINITY);
        for (i, s) in sensed.iter().enumerate() {
            let (p, d) = s.dist.row_min(j);
            if d < best.2 {
                best = (i, p, d);
            }
        }
        if pool_min[j] < best.2 {
            r1 += pool_min[j];
        } else {
            r1 += best.2;
            let pn = sensed[best.0].dist.num_patches;
            ddist[best.0][j * pn + best.1] += weights.r1 / m as f64;
        }
    }
    r1 /= m as f64;

    // R2: per patch, the closest prototype
    let total: usize = sensed.iter().map(|s| s.dist.num_patches).sum();
    let mut r2 = 0.0;
    for (i, s) in sensed.iter().enumerate() {
        let pn = s.dist.num_patches;
        for p in 0..pn {
            let (j, d) = (0..m)
                .map(|j| (j, s.dist.values[j * pn + p]))
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            r2 += d;
            ddist[i][j * pn + p] += weights.r2 / total as f64;
        }
    }
    Ok((r1, r2 / total as f64))
}
