//! Training objective: cross-entropy on renormalized sigmoid activations,
//! prototype diversity, the two prototype/patch cluster terms and an L1
//! penalty on the decision head, combined with fixed weights.

use serde::{Deserialize, Serialize};

use crate::sensing::{squared_distance, PrototypeBank};
use crate::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_EPS_DIV: f64 = 1e-4;
/// Lower clamp on the mean nearest-neighbour prototype distance. Below 1 the
/// logarithm turns negative and the penalty would reward collapse, so the
/// clamp keeps the term nonnegative and pins collapsed banks at `1 / eps`.
pub const DIVERSITY_FLOOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub dist: f64,
    pub r1: f64,
    pub r2: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { class: 50.0, dist: 8.0, r1: 9.0, r2: 18.0, l1: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a nonnegative real, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [("class", self.class), ("dist", self.dist), ("r1", self.r1), ("r2", self.r2), ("l1", self.l1)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub l_dist: f64,
    pub l_r1: f64,
    pub l_r2: f64,
    pub l_l1: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassLoss {
    pub value: f64,
    /// Number of samples whose true-class probability hit the floor.
    pub clamped: usize,
}

/// Mean negative log-probability of the true class.
pub fn class_loss(probabilities: &[Vec<f64>], labels: &[u8]) -> Result<ClassLoss> {
    if probabilities.len() != labels.len() {
        return Err(Error::Shape("class loss: probabilities/labels length mismatch".into()));
    }
    if probabilities.is_empty() {
        return Err(Error::Validation("class loss over an empty batch".into()));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (p, &y) in probabilities.iter().zip(labels) {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("probability row sums to {sum}, not 1")));
        }
        let py = *p.get(y as usize).ok_or_else(|| Error::Validation(format!("label {y} out of range")))?;
        if py < PROB_FLOOR {
            clamped += 1;
        }
        total -= py.max(PROB_FLOOR).ln();
    }
    if clamped > 0 {
        log::warn!("class loss: {clamped} sample(s) had true-class probability below {PROB_FLOOR:e}");
    }
    Ok(ClassLoss { value: total / labels.len() as f64, clamped })
}

/// Gradient of one sample's `-ln P(y)` w.r.t. the logits, where
/// `P = sigmoid(z) / sum(sigmoid(z))`. Zero when the probability is clamped.
pub fn class_loss_logit_grad(activations: &[f64], label: usize) -> Vec<f64> {
    let s: f64 = activations.iter().sum();
    if activations[label] / s < PROB_FLOOR {
        return vec![0.0; activations.len()];
    }
    activations
        .iter()
        .enumerate()
        .map(|(c, &a)| {
            let own = if c == label { -(1.0 - a) } else { 0.0 };
            own + a * (1.0 - a) / s
        })
        .collect()
}

/// Each prototype's nearest other prototype: `(index, squared distance)`.
fn nearest_neighbours(bank: &PrototypeBank) -> Vec<(usize, f64)> {
    let m = bank.num_prototypes;
    (0..m)
        .map(|j| {
            (0..m)
                .filter(|&i| i != j)
                .map(|i| (i, squared_distance(bank.prototype(i), bank.prototype(j))))
                .fold((usize::MAX, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
        })
        .collect()
}

/// `1 / (ln(mean_j min_{i != j} ||w_i - w_j||^2) + eps)`.
pub fn diversity_loss(bank: &PrototypeBank, eps: f64) -> Result<f64> {
    if bank.num_prototypes < 2 {
        return Err(Error::Config("diversity loss needs at least two prototypes".into()));
    }
    let nn = nearest_neighbours(bank);
    let mean = nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64;
    Ok(1.0 / (mean.max(DIVERSITY_FLOOR).ln() + eps))
}

/// Gradient of `diversity_loss` w.r.t. the flat prototype values.
pub fn diversity_grad(bank: &PrototypeBank, eps: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; bank.values.len()];
    if bank.num_prototypes < 2 {
        return Err(Error::Config("diversity loss needs at least two prototypes".into()));
    }
    let nn = nearest_neighbours(bank);
    let m = nn.len() as f64;
    let mean = nn.iter().map(|(_, d)| d).sum::<f64>() / m;
    if mean <= DIVERSITY_FLOOR {
        return Ok(grad);
    }
    let denom = mean.ln() + eps;
    let dmean = -1.0 / (denom * denom) / mean;
    let n = bank.prototype_size();
    for (j, &(i, _)) in nn.iter().enumerate() {
        for k in 0..n {
            let diff = bank.values[j * n + k] - bank.values[i * n + k];
            let g = dmean / m * 2.0 * diff;
            grad[j * n + k] += g;
            grad[i * n + k] -= g;
        }
    }
    Ok(grad)
}

/// Mean over prototypes of the squared distance to the closest patch.
pub fn r1_loss(bank: &PrototypeBank, patches: &[&[f64]]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::Validation("R1 loss over an empty patch set".into()));
    }
    let m = bank.num_prototypes;
    let total: f64 = (0..m)
        .map(|j| patches.iter().map(|p| squared_distance(p, bank.prototype(j))).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / m as f64)
}

/// Mean over patches of the squared distance to the closest prototype.
pub fn r2_loss(bank: &PrototypeBank, patches: &[&[f64]]) -> Result<f64> {
    if bank.num_prototypes == 0 {
        return Err(Error::Validation("R2 loss with an empty prototype bank".into()));
    }
    if patches.is_empty() {
        return Err(Error::Validation("R2 loss over an empty patch set".into()));
    }
    let total: f64 = patches
        .iter()
        .map(|p| (0..bank.num_prototypes).map(|j| squared_distance(p, bank.prototype(j))).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / patches.len() as f64)
}

pub fn l1_loss(weights: &[f64]) -> f64 {
    weights.iter().map(|w| w.abs()).sum()
}

pub fn l1_grad(weights: &[f64]) -> Vec<f64> {
    weights.iter().map(|&w| if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 }).collect()
}

/// Unweighted terms fed to `total_loss`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub class: f64,
    pub dist: f64,
    pub r1: f64,
    pub r2: f64,
    pub l1: f64,
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("class", terms.class), ("dist", terms.dist), ("r1", terms.r1), ("r2", terms.r2), ("l1", terms.l1)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    let total = w.class * terms.class + w.dist * terms.dist + w.r1 * terms.r1 + w.r2 * terms.r2 + w.l1 * terms.l1;
    Ok(LossBreakdown { l_class: terms.class, l_dist: terms.dist, l_r1: terms.r1, l_r2: terms.r2, l_l1: terms.l1, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(m: usize, n: usize, values: Vec<f64>) -> PrototypeBank {
        PrototypeBank::new(m, 1, n, values).unwrap()
    }

    #[test]
    fn class_loss_examples() {
        let perfect = class_loss(&[vec![0.0, 1.0, 0.0, 0.0, 0.0]], &[1]).unwrap();
        assert_eq!(perfect.value, 0.0);
        let uniform = class_loss(&[vec![0.2; 5]], &[3]).unwrap();
        assert!((uniform.value - 1.6094).abs() < 1e-4);
        assert!((uniform.value + 0.2f64.ln()).abs() < 1e-12);
        let rows = vec![vec![0.2; 5], vec![0.1, 0.6, 0.1, 0.1, 0.1]];
        let batch = class_loss(&rows, &[0, 1]).unwrap();
        let each: f64 = (class_loss(&rows[..1], &[0]).unwrap().value + class_loss(&rows[1..], &[1]).unwrap().value) / 2.0;
        assert!((batch.value - each).abs() < 1e-15);
    }

    #[test]
    fn class_loss_clamps_zero_probability() {
        let r = class_loss(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]], &[2]).unwrap();
        assert_eq!(r.clamped, 1);
        assert!((r.value + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(class_loss(&[vec![0.5, 0.1, 0.0, 0.0, 0.0]], &[0]).is_err());
    }

    #[test]
    fn diversity_two_point_example() {
        let b = bank(2, 1, vec![0.0, 2.0]);
        let v = diversity_loss(&b, 1e-4).unwrap();
        assert!((v - 1.0 / (4f64.ln() + 1e-4)).abs() < 1e-15);
        assert!((v - 0.7213).abs() < 1e-4);
    }

    #[test]
    fn diversity_identical_prototypes_hit_the_clamp() {
        let b = bank(3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let v = diversity_loss(&b, 1e-4).unwrap();
        assert!(v.is_finite());
        assert!((v - 1e4).abs() < 1e-9);
        // close but distinct prototypes sit on the same plateau
        let near = diversity_loss(&bank(2, 1, vec![0.0, 0.5]), 1e-4).unwrap();
        assert_eq!(near, v);
        assert!(diversity_loss(&bank(1, 1, vec![0.0]), 1e-4).is_err());
    }

    proptest! {
        #[test]
        fn diversity_decreases_when_spread_out(
            values in proptest::collection::vec(-3.0f64..3.0, 8), t in 1.01f64..4.0
        ) {
            let b = bank(4, 2, values.clone());
            let nn = nearest_neighbours(&b);
            let mean = nn.iter().map(|(_, d)| d).sum::<f64>() / 4.0;
            prop_assume!(mean > 1.0);
            let scaled = bank(4, 2, values.iter().map(|v| v * t).collect());
            prop_assert!(diversity_loss(&scaled, 1e-4).unwrap() < diversity_loss(&b, 1e-4).unwrap());
        }

        #[test]
        fn r_losses_match_double_loops(
            m in 1usize..=10, n_patches in 1usize..=50, c in 1usize..4, seed in 0u64..10_000
        ) {
            let mut x = seed.wrapping_add(17);
            let mut next = || { x ^= x << 13; x ^= x >> 7; x ^= x << 17; (x % 2001) as f64 / 1000.0 - 1.0 };
            let b = bank(m, c, (0..m * c).map(|_| next()).collect());
            let flat: Vec<f64> = (0..n_patches * c).map(|_| next()).collect();
            let patches: Vec<&[f64]> = flat.chunks(c).collect();
            let mut r1 = 0.0;
            for j in 0..m {
                let mut best = f64::INFINITY;
                for p in &patches {
                    let mut d = 0.0;
                    for k in 0..c { d += (b.values[j * c + k] - p[k]) * (b.values[j * c + k] - p[k]); }
                    if d < best { best = d; }
                }
                r1 += best;
            }
            let mut r2 = 0.0;
            for p in &patches {
                let mut best = f64::INFINITY;
                for j in 0..m {
                    let mut d = 0.0;
                    for k in 0..c { d += (p[k] - b.values[j * c + k]) * (p[k] - b.values[j * c + k]); }
                    if d < best { best = d; }
                }
                r2 += best;
            }
            prop_assert_eq!(r1_loss(&b, &patches).unwrap(), r1 / m as f64);
            prop_assert_eq!(r2_loss(&b, &patches).unwrap(), r2 / n_patches as f64);
        }
    }

    #[test]
    fn r_loss_hand_examples() {
        let one = bank(1, 1, vec![0.0]);
        assert_eq!(r1_loss(&one, &[&[1.0], &[3.0]]).unwrap(), 1.0);
        let proto = bank(1, 1, vec![1.0]);
        assert_eq!(r2_loss(&proto, &[&[0.0], &[4.0]]).unwrap(), 5.0);
        let b = bank(2, 1, vec![0.5, 2.0]);
        assert_eq!(r1_loss(&b, &[&[0.5], &[2.0], &[9.0]]).unwrap(), 0.0);
        assert_eq!(r2_loss(&b, &[&[2.0], &[0.5]]).unwrap(), 0.0);
        assert!(r1_loss(&b, &[]).is_err());
        let empty = PrototypeBank { num_prototypes: 0, patch_len: 1, channels: 1, values: vec![], meta: vec![] };
        assert!(r2_loss(&empty, &[&[1.0]]).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[1.0; 80]), 80.0);
        assert_eq!(l1_loss(&[0.0; 10]), 0.0);
        let w = [0.3, -1.2, 0.0, 2.5];
        let half: Vec<f64> = w.iter().map(|v| v / 2.0).collect();
        assert_eq!(l1_loss(&half), l1_loss(&w) / 2.0);
    }

    #[test]
    fn weighted_total() {
        let unit = LossTerms { class: 1.0, dist: 1.0, r1: 1.0, r2: 1.0, l1: 1.0 };
        let b = total_loss(&unit, &LossWeights::default()).unwrap();
        assert!((b.total - 85.3).abs() < 1e-9);
        let only_class = LossWeights { class: 1.0, dist: 0.0, r1: 0.0, r2: 0.0, l1: 0.0 };
        let terms = LossTerms { class: 0.7, dist: 3.0, r1: 2.0, r2: 1.0, l1: 9.0 };
        assert_eq!(total_loss(&terms, &only_class).unwrap().total, 0.7);
        let bad = LossTerms { r2: f64::NAN, ..terms };
        let err = total_loss(&bad, &only_class).unwrap_err();
        assert!(err.to_string().contains("r2"));
    }

    #[test]
    fn class_grad_matches_finite_differences() {
        use crate::layers::sigmoid;
        let z = [0.3, -1.1, 2.0, 0.5, -0.2];
        let f = |z: &[f64]| {
            let a: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            let s: f64 = a.iter().sum();
            -(a[2] / s).ln()
        };
        let a: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let g = class_loss_logit_grad(&a, 2);
        for c in 0..5 {
            let mut zp = z;
            zp[c] += 1e-6;
            let mut zm = z;
            zm[c] -= 1e-6;
            let num = (f(&zp) - f(&zm)) / 2e-6;
            assert!((num - g[c]).abs() < 1e-8, "c={c}: {num} vs {}", g[c]);
        }
    }

    #[test]
    fn diversity_grad_matches_finite_differences() {
        let values = vec![0.1, 1.5, -0.7, 2.2, 1.9, -1.3];
        let b = bank(3, 2, values.clone());
        let g = diversity_grad(&b, 1e-4).unwrap();
        for k in 0..values.len() {
            let mut p = values.clone();
            p[k] += 1e-6;
            let mut m = values.clone();
            m[k] -= 1e-6;
            let num = (diversity_loss(&bank(3, 2, p), 1e-4).unwrap() - diversity_loss(&bank(3, 2, m), 1e-4).unwrap()) / 2e-6;
            assert!((num - g[k]).abs() < 1e-7, "k={k}: {num} vs {}", g[k]);
        }
    }
}
