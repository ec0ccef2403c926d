//! Mini-batch training with early stopping, subject-wise cross-validation
//! and logit-sum ensembles.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{EpochWindow, FoldAssignment, WindowRef};
use crate::decision::{argmax, StagePrediction};
use crate::evaluation::{confusion, metrics, ConfusionMatrix, MetricsReport};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Which patches the R1 minimum ranges over during a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScope {
    /// The current mini-batch only.
    #[default]
    Batch,
    /// The mini-batch plus the whole training set's feature maps, refreshed
    /// at the start of every epoch.
    FullSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Project prototypes onto training patches every this many epochs.
    pub projection_period: Option<usize>,
    pub final_projection: bool,
    /// Before each validation pass, reset the score normalizations' running
    /// statistics to whole-training-set statistics under the current weights.
    pub refresh_norm_stats: bool,
    pub loss: LossWeights,
    pub cluster_scope: ClusterScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            batch_size: 64,
            patience: 50,
            max_epochs: 200,
            seed: 0,
            projection_period: None,
            final_projection: true,
            refresh_norm_stats: true,
            loss: LossWeights::default(),
            cluster_scope: ClusterScope::Batch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalization".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        if self.projection_period == Some(0) {
            return Err(Error::Config("projection period must be positive (omit it to disable)".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0 }
    }

    /// Record epoch `epoch` (1-based); returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub train_accuracy: f64,
    pub val: LossBreakdown,
    pub val_accuracy: f64,
    pub learning_rate: f64,
    pub projected: bool,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Step { epoch: usize, step: usize, loss: &'a LossBreakdown },
    Epoch(&'a EpochRecord),
    Stop { reason: &'a StopReason, best_epoch: usize, best_val_loss: f64 },
}

/// Stored in checkpoints so a model documents how it was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss after the final projection, when one ran.
    pub final_val_loss: Option<f64>,
    pub stop_reason: StopReason,
    #[serde(default)]
    pub train_subjects: Vec<String>,
    #[serde(default)]
    pub val_subjects: Vec<String>,
}

pub struct TrainOutcome {
    /// Best-validation model (projected if final projection is on).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

struct TrainLog(Option<BufWriter<File>>);

impl TrainLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(TrainLog(None)),
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(TrainLog(Some(BufWriter::new(f))))
            }
        }
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(rec).expect("log record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

fn subjects_of(windows: &[EpochWindow]) -> BTreeSet<&str> {
    windows.iter().map(|w| w.subject_id()).collect()
}

fn accuracy(windows: &[EpochWindow], preds: &[StagePrediction]) -> f64 {
    let hits = windows.iter().zip(preds).filter(|(w, p)| w.label == p.predicted).count();
    hits as f64 / windows.len().max(1) as f64
}

fn mean_breakdown(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    LossBreakdown {
        l_class: sum.l_class / k,
        l_dist: sum.l_dist / k,
        l_r1: sum.l_r1 / k,
        l_r2: sum.l_r2 / k,
        l_l1: sum.l_l1 / k,
        total: sum.total / k,
    }
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.l_class += b.l_class;
    sum.l_dist += b.l_dist;
    sum.l_r1 += b.l_r1;
    sum.l_r2 += b.l_r2;
    sum.l_l1 += b.l_l1;
    sum.total += b.total;
}

/// Train a fresh model on `train`, early-stopping on `val`.
pub fn train_fold(
    train: &[EpochWindow],
    val: &[EpochWindow],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let overlap: Vec<&str> = subjects_of(train).intersection(&subjects_of(val)).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Validation(format!("subjects in both training and validation sets: {overlap:?}")));
    }
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Validation(format!(
            "need at least 2 training and 1 validation window, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let model = Model::new(model_cfg, cfg.seed)?;
    train_model(model, train, val, cfg, log_path)
}

/// Optimize an existing model. Deterministic given `cfg.seed`.
pub fn train_model(
    mut model: Model,
    train: &[EpochWindow],
    val: &[EpochWindow],
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut log = TrainLog::open(log_path)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut opt = Adam::new(cfg.optimizer, &model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut shuffle_rng);
        let pool: Vec<Mat> = match cfg.cluster_scope {
            ClusterScope::Batch => Vec::new(),
            ClusterScope::FullSet => model.feature_entries(train)?.into_iter().map(|e| e.features).collect(),
        };
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        let mut hits = 0;
        let mut seen = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // batch statistics are undefined for a single window
                continue;
            }
            let signals: Vec<&[f64]> = chunk.iter().map(|&i| train[i].signal()).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train[i].label).collect();
            let step = match model.train_step(&signals, &labels, &cfg.loss, &mut dropout_rng, &pool) {
                Ok(s) if s.grads.all_finite() => s,
                Ok(_) => {
                    stop = StopReason::Diverged(format!("non-finite gradient at epoch {epoch}, step {}", steps + 1));
                    break 'epochs;
                }
                Err(Error::Numeric(msg)) => {
                    stop = StopReason::Diverged(format!("epoch {epoch}, step {}: {msg}", steps + 1));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut model.params, &step.grads);
            model.apply_norm_stats(&step.norm_stats);
            if !model.params.all_finite() {
                stop = StopReason::Diverged(format!("non-finite parameters after epoch {epoch}, step {}", steps + 1));
                break 'epochs;
            }
            steps += 1;
            log.write(&LogRecord::Step { epoch, step: steps, loss: &step.breakdown })?;
            accumulate(&mut sum, &step.breakdown);
            hits += step.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
        }
        let projected = cfg.projection_period.is_some_and(|p| epoch % p == 0);
        if projected || cfg.refresh_norm_stats {
            let entries = model.feature_entries(train)?;
            if projected {
                model.project(&entries)?;
            }
            model.recalibrate_norms(&entries)?;
        }
        let (val_loss, preds) = match model.evaluate_loss(val, &cfg.loss) {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => {
                stop = StopReason::Diverged(format!("validation at epoch {epoch}: {msg}"));
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let rec = EpochRecord {
            epoch,
            train: mean_breakdown(&sum, steps),
            train_accuracy: hits as f64 / seen.max(1) as f64,
            val: val_loss,
            val_accuracy: accuracy(val, &preds),
            learning_rate: cfg.optimizer.learning_rate,
            projected,
        };
        log::info!(
            "epoch {epoch}: train {:.4} (acc {:.3}), val {:.4} (acc {:.3}){} [{:.1}s]",
            rec.train.total,
            rec.train_accuracy,
            rec.val.total,
            rec.val_accuracy,
            if projected { ", projected" } else { "" },
            started.elapsed().as_secs_f64()
        );
        log.write(&LogRecord::Epoch(&rec))?;
        history.push(rec);
        if stopper.observe(epoch, val_loss.total) {
            best = model.clone();
        }
        if stopper.should_stop(epoch) {
            stop = StopReason::Patience;
            break;
        }
    }

    let mut final_val_loss = None;
    if let StopReason::Diverged(msg) = &stop {
        log::error!("training diverged ({msg}); keeping the best finite checkpoint");
    } else if cfg.final_projection {
        let entries = best.feature_entries(train)?;
        best.project(&entries)?;
        best.recalibrate_norms(&entries)?;
        final_val_loss = Some(best.evaluate_loss(val, &cfg.loss)?.0.total);
    }
    log.write(&LogRecord::Stop { reason: &stop, best_epoch: stopper.best_epoch, best_val_loss: stopper.best })?;
    let summary = TrainSummary {
        config: cfg.clone(),
        epochs_run: history.len(),
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        final_val_loss,
        stop_reason: stop,
        train_subjects: subjects_of(train).into_iter().map(String::from).collect(),
        val_subjects: subjects_of(val).into_iter().map(String::from).collect(),
    };
    Ok(TrainOutcome { model: best, history, summary })
}

/// Windows whose subject is in `subjects`, in input order.
pub fn select_subjects(windows: &[EpochWindow], subjects: &[String]) -> Vec<EpochWindow> {
    let set: BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
    windows.iter().filter(|w| set.contains(w.subject_id())).cloned().collect()
}

/// One scored test window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindow {
    pub window: WindowRef,
    pub label: u8,
    /// `[WScore, PScore]` the prediction was made from.
    pub score: Vec<f64>,
    /// Prototype with the smallest patch distance.
    pub nearest_prototype: usize,
    pub prediction: StagePrediction,
}

pub fn predict_windows(model: &Model, windows: &[EpochWindow]) -> Result<Vec<ScoredWindow>> {
    windows
        .iter()
        .map(|w| {
            let inf = model.infer(w.signal())?;
            Ok(ScoredWindow {
                window: w.window.clone(),
                label: w.label,
                nearest_prototype: argmax(&inf.sensed.max_val),
                score: inf.score,
                prediction: inf.prediction,
            })
        })
        .collect()
}

pub fn confusion_of(scored: &[ScoredWindow]) -> Result<ConfusionMatrix> {
    let labels: Vec<u8> = scored.iter().map(|s| s.label).collect();
    let preds: Vec<u8> = scored.iter().map(|s| s.prediction.predicted).collect();
    confusion(&labels, &preds)
}

pub struct FoldReport {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub test: Vec<ScoredWindow>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

pub struct CrossValidation {
    pub folds: Vec<FoldReport>,
    /// Element-wise sum of the per-fold test matrices.
    pub aggregate: ConfusionMatrix,
}

/// Train and test every fold in `which` (all folds when `None`). Fold `f`
/// trains with seed `cfg.seed + f`. Logs go to `log_dir/fold{f}.jsonl`.
pub fn cross_validate(
    windows: &[EpochWindow],
    folds: &FoldAssignment,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    which: Option<&[usize]>,
    log_dir: Option<&Path>,
) -> Result<CrossValidation> {
    folds.audit()?;
    let all: Vec<usize> = (0..folds.fold_count).collect();
    let which = which.unwrap_or(&all);
    let mut reports = Vec::with_capacity(which.len());
    let mut aggregate = ConfusionMatrix::default();
    for &fold in which {
        if fold >= folds.fold_count {
            return Err(Error::Config(format!("fold {fold} out of range (k = {})", folds.fold_count)));
        }
        let train = select_subjects(windows, &folds.train_subjects(fold));
        let val = select_subjects(windows, folds.validation_subjects(fold));
        let test = select_subjects(windows, &folds.test_subjects(fold));
        let test_subjects = subjects_of(&test);
        if !subjects_of(&train).is_disjoint(&test_subjects) || !subjects_of(&val).is_disjoint(&test_subjects) {
            return Err(Error::Validation(format!("fold {fold}: test subject leaked into training data")));
        }
        let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(fold as u64), ..cfg.clone() };
        let log_path = log_dir.map(|d| d.join(format!("fold{fold}.jsonl")));
        let outcome = train_fold(&train, &val, model_cfg, &fold_cfg, log_path.as_deref())?;
        let scored = predict_windows(&outcome.model, &test)?;
        let cm = confusion_of(&scored)?;
        aggregate.add(&cm);
        let m = metrics(&cm)?;
        reports.push(FoldReport { fold, outcome, test: scored, confusion: cm, metrics: m });
    }
    Ok(CrossValidation { folds: reports, aggregate })
}

/// Checkpoint paths whose logits are summed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
}

pub struct Ensemble {
    pub members: Vec<Model>,
}

pub fn sum_logits(member_logits: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; member_logits.first().map_or(0, Vec::len)];
    for l in member_logits {
        for (o, v) in out.iter_mut().zip(l) {
            *o += v;
        }
    }
    out
}

impl Ensemble {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
        let data = first.cfg.data.clone();
        for (i, m) in members.iter().enumerate() {
            if m.cfg.data.num_classes != data.num_classes {
                return Err(Error::Config(format!("ensemble member {i} predicts {} classes", m.cfg.data.num_classes)));
            }
            if m.cfg.data.window_samples() != data.window_samples() {
                return Err(Error::Config(format!("ensemble member {i} expects a different input length")));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn load(spec: &EnsembleSpec) -> Result<Self> {
        let members = spec.members.iter().map(|p| checkpoint::load(p).map(|c| c.model)).collect::<Result<_>>()?;
        Ensemble::new(members)
    }

    pub fn member_logits(&self, signal: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.members.iter().map(|m| m.predict(signal).map(|p| p.logits)).collect()
    }

    pub fn predict(&self, signal: &[f64]) -> Result<StagePrediction> {
        Ok(StagePrediction::from_logits(sum_logits(&self.member_logits(signal)?)))
    }
}

pub fn ensemble_predict(spec: &EnsembleSpec, window: &EpochWindow) -> Result<StagePrediction> {
    Ensemble::load(spec)?.predict(window.signal())
}
