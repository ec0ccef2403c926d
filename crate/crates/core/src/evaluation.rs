//! Confusion matrices and per-class / overall agreement metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Stage, NUM_STAGES};
use crate::{Error, Result};

/// Rows are actual stages, columns predicted stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_STAGES]; NUM_STAGES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_STAGES).map(|c| self.counts[c][c]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    pub fn record(&mut self, actual: u8, predicted: u8) -> Result<()> {
        if actual as usize >= NUM_STAGES || predicted as usize >= NUM_STAGES {
            return Err(Error::Validation(format!("stage pair ({actual}, {predicted}) out of range")));
        }
        self.counts[actual as usize][predicted as usize] += 1;
        Ok(())
    }

    /// Plain-text table with per-row recall in parentheses.
    pub fn to_text(&self) -> String {
        let mut s = String::from("actual\\pred");
        for st in Stage::ALL {
            let _ = write!(s, "{:>8}", st.name());
        }
        s.push('\n');
        for st in Stage::ALL {
            let c = st as usize;
            let _ = write!(s, "{:<11}", st.name());
            for p in 0..NUM_STAGES {
                let _ = write!(s, "{:>8}", self.counts[c][p]);
            }
            let rt = self.row_total(c);
            if rt > 0 {
                let _ = write!(s, "  ({:.3})", self.counts[c][c] as f64 / rt as f64);
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", labels.len(), predictions.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (&a, &p) in labels.iter().zip(predictions) {
        cm.record(a, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    /// Class never occurs in labels or predictions; left out of the macro F1.
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub chance_agreement: f64,
    pub kappa: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation("metrics of an empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..NUM_STAGES)
        .map(|c| {
            let tp = cm.counts[c][c];
            let (precision, precision_undefined) = ratio(tp, cm.col_total(c));
            let (recall, recall_undefined) = ratio(tp, cm.row_total(c));
            let (f1, f1_undefined) = if precision + recall > 0.0 {
                (2.0 * precision * recall / (precision + recall), false)
            } else {
                (0.0, true)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cm.row_total(c),
                precision_undefined,
                recall_undefined,
                f1_undefined,
                absent: precision_undefined && recall_undefined,
            }
        })
        .collect();
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| !m.absent).collect();
    let macro_f1 = present.iter().map(|m| m.f1).sum::<f64>() / present.len() as f64;
    let accuracy = cm.trace() as f64 / total as f64;
    let t2 = (total as f64).powi(2);
    let chance_agreement = (0..NUM_STAGES).map(|c| cm.row_total(c) as f64 * cm.col_total(c) as f64).sum::<f64>() / t2;
    let kappa = if 1.0 - chance_agreement > 0.0 {
        (accuracy - chance_agreement) / (1.0 - chance_agreement)
    } else if accuracy == 1.0 {
        // one class everywhere, predicted perfectly
        1.0
    } else {
        0.0
    };
    Ok(MetricsReport { per_class, accuracy, macro_f1, chance_agreement, kappa, total })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<6}{:>10}{:>10}{:>10}{:>9}\n", "stage", "precision", "recall", "f1", "support");
        for (st, m) in Stage::ALL.iter().zip(&self.per_class) {
            let flag = if m.absent {
                "  (absent)"
            } else if m.precision_undefined || m.recall_undefined || m.f1_undefined {
                "  (undefined terms set to 0)"
            } else {
                ""
            };
            let _ = writeln!(s, "{:<6}{:>10.4}{:>10.4}{:>10.4}{:>9}{flag}", st.name(), m.precision, m.recall, m.f1, m.support);
        }
        let _ = writeln!(
            s,
            "accuracy {:.4}  macro-F1 {:.4}  kappa {:.4}  (n = {})",
            self.accuracy, self.macro_f1, self.kappa, self.total
        );
        s
    }

    /// Per-class rows followed by an overall footer row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,precision,recall,f1,support,undefined\n");
        for (st, m) in Stage::ALL.iter().zip(&self.per_class) {
            let undefined = m.precision_undefined || m.recall_undefined || m.f1_undefined;
            let _ = writeln!(s, "{},{},{},{},{},{}", st.name(), m.precision, m.recall, m.f1, m.support, undefined);
        }
        let _ = writeln!(s, "overall,accuracy={},macro_f1={},kappa={},{},", self.accuracy, self.macro_f1, self.kappa, self.total);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_diagonal() {
        let cm = confusion(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap();
        for a in 0..5 {
            for p in 0..5 {
                assert_eq!(cm.counts[a][p], u64::from(a == p));
            }
        }
        let m = metrics(&cm).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_input_gives_zero_matrix() {
        let cm = confusion(&[], &[]).unwrap();
        assert_eq!(cm, ConfusionMatrix::default());
        assert!(metrics(&cm).is_err());
        assert!(confusion(&[0], &[]).is_err());
    }

    #[test]
    fn two_class_block() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 40;
        cm.counts[0][1] = 10;
        cm.counts[1][0] = 10;
        cm.counts[1][1] = 40;
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.chance_agreement, 0.5);
        assert!((m.kappa - 0.6).abs() < 1e-12);
        assert!(m.per_class[2].absent);
        assert!((m.macro_f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn undefined_precision_flagged() {
        // class 1 occurs but is never predicted
        let cm = confusion(&[0, 1, 1], &[0, 0, 0]).unwrap();
        let m = metrics(&cm).unwrap();
        assert!(m.per_class[1].precision_undefined);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!(!m.per_class[1].absent);
    }

    #[test]
    fn single_class_perfect() {
        let m = metrics(&confusion(&[2, 2, 2], &[2, 2, 2]).unwrap()).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.kappa), (1.0, 1.0, 1.0));
    }

    proptest! {
        #[test]
        fn self_agreement_is_perfect(y in proptest::collection::vec(0u8..5, 1..200)) {
            let m = metrics(&confusion(&y, &y).unwrap()).unwrap();
            prop_assert_eq!(m.accuracy, 1.0);
            prop_assert_eq!(m.macro_f1, 1.0);
            prop_assert_eq!(m.kappa, 1.0);
        }

        #[test]
        fn shuffling_pairs_keeps_matrix(pairs in proptest::collection::vec((0u8..5, 0u8..5), 0..100), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (a, p): (Vec<u8>, Vec<u8>) = pairs.iter().cloned().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (sa, sp): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
            prop_assert_eq!(confusion(&a, &p).unwrap(), confusion(&sa, &sp).unwrap());
        }

        #[test]
        fn report_ranges(pairs in proptest::collection::vec((0u8..5, 0u8..5), 1..300)) {
            let (a, p): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let m = metrics(&confusion(&a, &p).unwrap()).unwrap();
            let present: Vec<f64> = m.per_class.iter().filter(|c| !c.absent).map(|c| c.f1).collect();
            prop_assert!((m.macro_f1 - present.iter().sum::<f64>() / present.len() as f64).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&m.accuracy));
            prop_assert!((-1.0..=1.0).contains(&m.kappa));
            for c in &m.per_class {
                prop_assert!((0.0..=1.0).contains(&c.precision) && (0.0..=1.0).contains(&c.recall) && (0.0..=1.0).contains(&c.f1));
            }
        }
    }
}
