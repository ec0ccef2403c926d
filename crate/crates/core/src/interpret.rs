//! Explanation artifacts: per-window scoring sheets, prototype cards,
//! correct-vs-error score summaries and score embedding export.
//!
//! Contributions are the raw linear terms `score[i] * W[i][c]` ahead of the
//! sigmoid, so for every window the contribution columns plus the bias equal
//! the logits exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{EpochWindow, Stage, WindowRef, NUM_STAGES};
use crate::decision::{argmax, contribution_matrix};
use crate::model::Model;
use crate::sensing::{nearest_patches, occlusion_sensitivity, FeatureEntry, OcclusionConfig, OcclusionResult};
use crate::training::ScoredWindow;
use crate::{Error, Result};

/// Number of nearest training segments shown on a card.
pub const DEFAULT_NEAREST: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Max-pooled similarity path (WScore).
    Waveform,
    /// Mean-pooled similarity path (PScore).
    Proportion,
}

impl Estimator {
    pub fn short(self) -> &'static str {
        match self {
            Estimator::Waveform => "WE",
            Estimator::Proportion => "PE",
        }
    }
}

/// Maps a score index in `0..2M` to its prototype and estimator.
pub fn score_slot(i: usize, m: usize) -> (usize, Estimator) {
    if i < m {
        (i, Estimator::Waveform)
    } else {
        (i - m, Estimator::Proportion)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub prototype: usize,
    pub estimator: Estimator,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub window: WindowRef,
    pub predicted: Stage,
    pub actual: Option<Stage>,
    pub score: Vec<f64>,
    /// `2M x 5`; row `i` is score `i`'s push on each stage logit.
    pub contributions: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Per stage, the largest contributions in descending order.
    pub top: Vec<Vec<Contributor>>,
}

impl ExplanationReport {
    /// Column sums of the contribution matrix plus the bias.
    pub fn reconstructed_logits(&self) -> Vec<f64> {
        (0..self.bias.len())
            .map(|c| self.contributions.iter().map(|row| row[c]).sum::<f64>() + self.bias[c])
            .collect()
    }

    /// Largest absolute gap between the reconstruction and the logits.
    pub fn fidelity_gap(&self) -> f64 {
        self.reconstructed_logits().iter().zip(&self.logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let m = self.score.len() / 2;
        let mut s = format!("window {}\npredicted {}", self.window, self.predicted);
        if let Some(a) = self.actual {
            let _ = write!(s, ", actual {a}");
        }
        s.push_str("\ncontributions are pre-sigmoid linear terms score * weight\n");
        let _ = write!(s, "{:<8}{:>10}", "score", "value");
        for st in Stage::ALL {
            let _ = write!(s, "{:>10}", st.name());
        }
        s.push('\n');
        for (i, row) in self.contributions.iter().enumerate() {
            let (j, est) = score_slot(i, m);
            let _ = write!(s, "{:<8}{:>10.4}", format!("{}{j}", est.short()), self.score[i]);
            for v in row {
                let _ = write!(s, "{v:>10.4}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<18}", "bias");
        for v in &self.bias {
            let _ = write!(s, "{v:>10.4}");
        }
        let _ = write!(s, "\n{:<18}", "logit");
        for v in &self.logits {
            let _ = write!(s, "{v:>10.4}");
        }
        let _ = write!(s, "\n{:<18}", "probability");
        for v in &self.probabilities {
            let _ = write!(s, "{v:>10.4}");
        }
        s.push('\n');
        for (st, top) in Stage::ALL.iter().zip(&self.top) {
            let names: Vec<String> =
                top.iter().map(|t| format!("{}{} ({:+.4})", t.estimator.short(), t.prototype, t.contribution)).collect();
            let _ = writeln!(s, "top for {}: {}", st.name(), names.join(", "));
        }
        s
    }

    /// Contribution table as CSV, one row per score entry.
    pub fn to_csv(&self) -> String {
        let m = self.score.len() / 2;
        let mut s = String::from("estimator,prototype,score");
        for st in Stage::ALL {
            let _ = write!(s, ",{}", st.name());
        }
        s.push('\n');
        for (i, row) in self.contributions.iter().enumerate() {
            let (j, est) = score_slot(i, m);
            let _ = write!(s, "{},{j},{}", est.short(), self.score[i]);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn require_projected(model: &Model) -> Result<()> {
    if model.bank().is_projected() {
        Ok(())
    } else {
        Err(Error::Validation(
            "prototypes have not been projected onto training patches; project the bank before explaining".into(),
        ))
    }
}

/// Scoring sheet for one window, with the `top_n` largest contributors per stage.
pub fn explain(model: &Model, window: &EpochWindow, top_n: usize) -> Result<ExplanationReport> {
    require_projected(model)?;
    let inf = model.infer(window.signal())?;
    let contributions = contribution_matrix(&inf.score, &model.head, &model.params);
    let m = model.num_prototypes();
    let top = (0..NUM_STAGES)
        .map(|c| {
            let mut all: Vec<Contributor> = contributions
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let (prototype, estimator) = score_slot(i, m);
                    Contributor { prototype, estimator, contribution: row[c] }
                })
                .collect();
            all.sort_by(|a, b| b.contribution.total_cmp(&a.contribution));
            all.truncate(top_n);
            all
        })
        .collect();
    Ok(ExplanationReport {
        window: window.window.clone(),
        predicted: Stage::from_code(inf.prediction.predicted).expect("argmax over five stages"),
        actual: Stage::from_code(window.label),
        bias: model.head.bias(&model.params).to_vec(),
        logits: inf.prediction.logits,
        probabilities: inf.prediction.probabilities,
        score: inf.score,
        contributions,
        top,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestSegment {
    pub window: WindowRef,
    pub patch_index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCard {
    pub prototype: usize,
    /// Ascending by distance, at most one patch per window.
    pub nearest: Vec<NearestSegment>,
    /// Occlusion result on the prototype's source window.
    pub occlusion: OcclusionResult,
    /// Head weights of the WE and PE scores of this prototype, one per stage.
    pub we_weights: Vec<f64>,
    pub pe_weights: Vec<f64>,
    /// Mean contribution of this prototype (both estimators) to each stage
    /// logit over the card's window set.
    pub mean_contribution: Vec<f64>,
    pub dominant_stage: Stage,
}

impl PrototypeCard {
    pub fn to_text(&self) -> String {
        let mut s = format!("prototype {} (contributes most to {})\n", self.prototype, self.dominant_stage);
        for (k, n) in self.nearest.iter().enumerate() {
            let _ = writeln!(s, "  nearest #{}: {} patch {} distance {:.6}", k + 1, n.window, n.patch_index, n.distance);
        }
        let _ = writeln!(
            s,
            "  occlusion interval: {:.2} s to {:.2} s",
            self.occlusion.onset_s,
            self.occlusion.onset_s + self.occlusion.duration_s
        );
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:+.4}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "  WE weights: {}", row(&self.we_weights));
        let _ = writeln!(s, "  PE weights: {}", row(&self.pe_weights));
        let _ = writeln!(s, "  mean contribution: {}", row(&self.mean_contribution));
        s
    }
}

/// Cards for every prototype of a projected model. `windows` is the
/// training set the bank was projected onto.
pub fn build_prototype_cards(
    model: &Model,
    windows: &[EpochWindow],
    n: usize,
    occl: &OcclusionConfig,
) -> Result<Vec<PrototypeCard>> {
    require_projected(model)?;
    if windows.is_empty() {
        return Err(Error::Validation("prototype cards need a non-empty window set".into()));
    }
    let entries: Vec<FeatureEntry> = model.feature_entries(windows)?;
    let bank = model.bank();
    let m = model.num_prototypes();
    let w = model.head_weights();

    let mut totals = vec![vec![0.0; NUM_STAGES]; m];
    for e in &entries {
        let inf = model.infer_features(e.features.clone())?;
        let contrib = contribution_matrix(&inf.score, &model.head, &model.params);
        for (i, row) in contrib.iter().enumerate() {
            for (t, v) in totals[i % m].iter_mut().zip(row) {
                *t += v;
            }
        }
    }

    let hz = model.cfg.data.sampling_hz;
    let mut cards = Vec::with_capacity(m);
    for j in 0..m {
        let nearest = nearest_patches(&bank, j, &entries, n)?
            .into_iter()
            .map(|p| NearestSegment { window: p.window, patch_index: p.patch_index, distance: p.distance })
            .collect();
        let source = bank.meta[j].source.as_ref().expect("projected prototypes record their source");
        let src = windows
            .iter()
            .find(|w| w.window == source.window)
            .ok_or_else(|| Error::Validation(format!("source window {} of prototype {j} is not in the window set", source.window)))?;
        let occlusion = occlusion_sensitivity(&bank, src.signal(), hz, occl, |x| model.extract(x))?.swap_remove(j);
        let mean_contribution: Vec<f64> = totals[j].iter().map(|t| t / entries.len() as f64).collect();
        cards.push(PrototypeCard {
            prototype: j,
            nearest,
            occlusion,
            we_weights: w[j * NUM_STAGES..(j + 1) * NUM_STAGES].to_vec(),
            pe_weights: w[(m + j) * NUM_STAGES..(m + j + 1) * NUM_STAGES].to_vec(),
            dominant_stage: Stage::from_code(argmax(&mean_contribution) as u8).expect("five stages"),
            mean_contribution,
        });
    }
    Ok(cards)
}

/// Store each card's occlusion interval in the model's prototype metadata.
pub fn record_occlusion(model: &mut Model, cards: &[PrototypeCard]) {
    for card in cards {
        model.proto_meta[card.prototype].occlusion_interval = Some((card.occlusion.onset_s, card.occlusion.duration_s));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageScoreGroups {
    pub stage: Stage,
    pub total: u64,
    pub correct: u64,
    pub errors: u64,
    /// Mean `[WScore, PScore]` over correct windows; `None` when there are none.
    pub correct_mean: Option<Vec<f64>>,
    pub error_mean: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorScoreSummary {
    pub num_prototypes: usize,
    pub stages: Vec<StageScoreGroups>,
    /// Stages with no windows at all.
    pub omitted: Vec<Stage>,
}

fn mean_of(rows: &[&[f64]]) -> Option<Vec<f64>> {
    let first = rows.first()?;
    let mut out = vec![0.0; first.len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r.iter()) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    Some(out)
}

fn scores_of<'a>(v: &[&'a ScoredWindow]) -> Vec<&'a [f64]> {
    v.iter().map(|s| s.score.as_slice()).collect()
}

/// Mean scores of correctly and wrongly classified windows, per actual stage.
pub fn error_score_summary(scored: &[ScoredWindow]) -> Result<ErrorScoreSummary> {
    let width = scored.first().map_or(0, |s| s.score.len());
    if width % 2 != 0 || scored.iter().any(|s| s.score.len() != width) {
        return Err(Error::Shape("scored windows carry score vectors of different or odd lengths".into()));
    }
    let mut stages = Vec::new();
    let mut omitted = Vec::new();
    for st in Stage::ALL {
        let of_stage: Vec<&ScoredWindow> = scored.iter().filter(|s| s.label == st.code()).collect();
        if of_stage.is_empty() {
            omitted.push(st);
            continue;
        }
        let (good, bad): (Vec<&ScoredWindow>, Vec<&ScoredWindow>) =
            of_stage.iter().partition(|s| s.prediction.predicted == s.label);
        stages.push(StageScoreGroups {
            stage: st,
            total: of_stage.len() as u64,
            correct: good.len() as u64,
            errors: bad.len() as u64,
            correct_mean: mean_of(&scores_of(&good)),
            error_mean: mean_of(&scores_of(&bad)),
        });
    }
    Ok(ErrorScoreSummary { num_prototypes: width / 2, stages, omitted })
}

impl ErrorScoreSummary {
    /// Long-format CSV: one row per (stage, group, estimator, prototype).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,group,count,estimator,prototype,mean_score\n");
        let m = self.num_prototypes;
        for g in &self.stages {
            for (name, count, mean) in [("correct", g.correct, &g.correct_mean), ("error", g.errors, &g.error_mean)] {
                let Some(mean) = mean else { continue };
                for (i, v) in mean.iter().enumerate() {
                    let (j, est) = score_slot(i, m);
                    let _ = writeln!(s, "{},{name},{count},{},{j},{v}", g.stage.name(), est.short());
                }
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.stages {
            let _ = writeln!(s, "{}: {} windows, {} correct, {} misclassified", g.stage, g.total, g.correct, g.errors);
            if g.error_mean.is_none() {
                let _ = writeln!(s, "  no misclassified windows");
            }
        }
        for st in &self.omitted {
            let _ = writeln!(s, "{st}: no windows (omitted)");
        }
        s
    }
}

/// Flat CSV of score vectors for external embedding tools, sorted by window.
pub fn export_score_embeddings(scored: &[ScoredWindow]) -> String {
    let m = scored.first().map_or(0, |s| s.score.len() / 2);
    let mut rows: Vec<&ScoredWindow> = scored.iter().collect();
    rows.sort_by(|a, b| a.window.cmp(&b.window));
    let mut s = String::from("subject_id,epoch_index,stage,predicted,nearest_prototype");
    for j in 0..m {
        let _ = write!(s, ",we_{j}");
    }
    for j in 0..m {
        let _ = write!(s, ",pe_{j}");
    }
    s.push('\n');
    let name = |code: u8| Stage::from_code(code).map_or("?", Stage::name);
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.window.subject_id,
            r.window.epoch_index,
            name(r.label),
            name(r.prediction.predicted),
            r.nearest_prototype
        );
        for v in &r.score {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::StagePrediction;
    use crate::model::tests::tiny_config;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn windows(n: usize, seed: u64) -> Vec<EpochWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
                EpochWindow::new(WindowRef { subject_id: format!("S{:02}", i % 2), epoch_index: i }, (i % 5) as u8, x)
            })
            .collect()
    }

    fn projected_model(ws: &[EpochWindow]) -> Model {
        let mut model = Model::new(&tiny_config(), 3).unwrap();
        let entries = model.feature_entries(ws).unwrap();
        model.project(&entries).unwrap();
        model.recalibrate_norms(&entries).unwrap();
        model
    }

    fn scored(label: u8, predicted: u8, score: Vec<f64>, epoch: usize) -> ScoredWindow {
        let mut logits = vec![0.0; 5];
        logits[predicted as usize] = 1.0;
        ScoredWindow {
            window: WindowRef { subject_id: "S01".into(), epoch_index: epoch },
            label,
            score,
            nearest_prototype: 0,
            prediction: StagePrediction::from_logits(logits),
        }
    }

    #[test]
    fn explain_requires_projection() {
        let ws = windows(4, 1);
        let model = Model::new(&tiny_config(), 3).unwrap();
        assert!(matches!(explain(&model, &ws[0], 3), Err(Error::Validation(_))));
        assert!(build_prototype_cards(&model, &ws, 3, &OcclusionConfig::default()).is_err());
    }

    #[test]
    fn contributions_reproduce_logits() {
        let ws = windows(10, 2);
        let model = projected_model(&ws);
        for w in &ws {
            let r = explain(&model, w, 3).unwrap();
            assert!(r.fidelity_gap() < 1e-9);
            assert_eq!(r.contributions.len(), 2 * model.num_prototypes());
            assert_eq!(r.predicted.code(), model.predict(w.signal()).unwrap().predicted);
            for t in &r.top {
                assert_eq!(t.len(), 3);
                assert!(t.windows(2).all(|p| p[0].contribution >= p[1].contribution));
            }
        }
    }

    #[test]
    fn zero_head_zeroes_contributions() {
        let ws = windows(6, 3);
        let mut model = projected_model(&ws);
        let id = model.head.fc.w;
        model.params.get_mut(id).iter_mut().for_each(|v| *v = 0.0);
        let r = explain(&model, &ws[0], 2).unwrap();
        assert!(r.contributions.iter().flatten().all(|&v| v == 0.0));
        assert!(r.fidelity_gap() < 1e-12);
    }

    #[test]
    fn cards_start_at_their_source() {
        let ws = windows(8, 4);
        let model = projected_model(&ws);
        let cards = build_prototype_cards(&model, &ws, 3, &OcclusionConfig { win_s: 0.5, stride_s: 0.25 }).unwrap();
        assert_eq!(cards.len(), model.num_prototypes());
        for (j, c) in cards.iter().enumerate() {
            let src = model.proto_meta[j].source.as_ref().unwrap();
            assert_eq!(c.nearest[0].window, src.window);
            assert_eq!(c.nearest[0].distance, 0.0);
            assert!(c.nearest.windows(2).all(|p| p[0].distance <= p[1].distance));
            let mut seen: Vec<&WindowRef> = c.nearest.iter().map(|n| &n.window).collect();
            seen.dedup();
            assert_eq!(seen.len(), c.nearest.len());
            assert_eq!(c.we_weights.len(), 5);
            assert_eq!(c.dominant_stage.code() as usize, argmax(&c.mean_contribution));
        }
    }

    #[test]
    fn summary_hand_means_and_conservation() {
        let rows = vec![
            scored(2, 2, vec![1.0, 2.0, 3.0, 4.0], 0),
            scored(2, 2, vec![3.0, 0.0, 1.0, 0.0], 1),
            scored(2, 0, vec![5.0, 5.0, 5.0, 5.0], 2),
            scored(0, 0, vec![0.0, 0.0, 0.0, 0.0], 3),
        ];
        let s = error_score_summary(&rows).unwrap();
        assert_eq!(s.num_prototypes, 2);
        let n2 = s.stages.iter().find(|g| g.stage == Stage::N2).unwrap();
        assert_eq!((n2.total, n2.correct, n2.errors), (3, 2, 1));
        assert_eq!(n2.correct_mean.as_deref(), Some(&[2.0, 1.0, 2.0, 2.0][..]));
        assert_eq!(n2.error_mean.as_deref(), Some(&[5.0; 4][..]));
        let wake = s.stages.iter().find(|g| g.stage == Stage::Wake).unwrap();
        assert!(wake.error_mean.is_none());
        assert_eq!(s.omitted, vec![Stage::N1, Stage::N3, Stage::Rem]);
        for g in &s.stages {
            assert_eq!(g.correct + g.errors, g.total);
        }
        assert!(s.to_csv().lines().count() > 1);
    }

    #[test]
    fn embedding_export_is_sorted_and_stable() {
        let rows = vec![scored(1, 1, vec![0.5, 0.25], 9), scored(3, 1, vec![1.0, 2.0], 2)];
        let a = export_score_embeddings(&rows);
        let b = export_score_embeddings(&[rows[1].clone(), rows[0].clone()]);
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "subject_id,epoch_index,stage,predicted,nearest_prototype,we_0,pe_0");
        assert!(lines[1].starts_with("S01,2,N3,N1,0,1,2"));
    }
}
