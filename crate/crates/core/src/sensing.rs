//! Wave prototypes and the distance map between feature patches and
//! prototypes, plus prototype projection and occlusion-based localization.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::WindowRef;
use crate::tensor::Mat;
use crate::{Error, Result};

/// Where a projected prototype came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSource {
    pub window: WindowRef,
    pub patch_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMeta {
    pub projected: bool,
    pub source: Option<PrototypeSource>,
    /// `(onset_s, duration_s)` relative to the start of the source window.
    pub occlusion_interval: Option<(f64, f64)>,
}

/// `M` prototypes of shape `K1 x C`, stored flat, prototype-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub num_prototypes: usize,
    pub patch_len: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub meta: Vec<PrototypeMeta>,
}

impl PrototypeBank {
    pub fn new(num_prototypes: usize, patch_len: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_prototypes * patch_len * channels {
            return Err(Error::Shape(format!(
                "prototype values: expected {} entries, got {}",
                num_prototypes * patch_len * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prototype value".into()));
        }
        Ok(PrototypeBank { num_prototypes, patch_len, channels, values, meta: vec![PrototypeMeta::default(); num_prototypes] })
    }

    pub fn prototype_size(&self) -> usize {
        self.patch_len * self.channels
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        let n = self.prototype_size();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn is_projected(&self) -> bool {
        self.meta.iter().all(|m| m.projected)
    }
}

/// `M x P` squared L2 distances, row `j` for prototype `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub num_prototypes: usize,
    pub num_patches: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.num_patches..(j + 1) * self.num_patches]
    }

    /// `(patch index, distance)` of the closest patch to prototype `j`; first index wins ties.
    pub fn row_min(&self, j: usize) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (p, &d) in self.row(j).iter().enumerate() {
            if d < best.1 {
                best = (p, d);
            }
        }
        best
    }
}

/// Patches of `patch_len` consecutive time steps, stride 1. Each patch is a
/// contiguous `patch_len * C` slice of the feature map.
pub fn extract_patches(s: &Mat, patch_len: usize) -> Result<Vec<&[f64]>> {
    if patch_len == 0 || patch_len > s.rows {
        return Err(Error::Shape(format!("patch length {patch_len} not in 1..={}", s.rows)));
    }
    let n = patch_len * s.cols;
    Ok((0..=s.rows - patch_len).map(|p| &s.data[p * s.cols..p * s.cols + n]).collect())
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance_map(s: &Mat, bank: &PrototypeBank) -> Result<DistanceMap> {
    if s.cols != bank.channels {
        return Err(Error::Shape(format!("feature map has {} channels, prototypes have {}", s.cols, bank.channels)));
    }
    let patches = extract_patches(s, bank.patch_len)?;
    let p = patches.len();
    let mut values = Vec::with_capacity(bank.num_prototypes * p);
    for j in 0..bank.num_prototypes {
        let w = bank.prototype(j);
        values.extend(patches.iter().map(|patch| squared_distance(patch, w)));
    }
    Ok(DistanceMap { num_prototypes: bank.num_prototypes, num_patches: p, values })
}

/// Eval-mode feature map of one training window.
#[derive(Clone, Debug)]
pub struct FeatureEntry {
    pub window: WindowRef,
    pub features: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatch {
    pub window: WindowRef,
    pub patch_index: usize,
    pub distance: f64,
}

fn match_order(a: &PatchMatch, b: &PatchMatch) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.window.cmp(&b.window))
        .then_with(|| a.patch_index.cmp(&b.patch_index))
}

/// The `n` closest windows to prototype `j`, keeping only the best patch per
/// window, sorted by distance then `(subject_id, epoch_index, patch)`.
pub fn nearest_patches(bank: &PrototypeBank, j: usize, dataset: &[FeatureEntry], n: usize) -> Result<Vec<PatchMatch>> {
    if dataset.is_empty() {
        return Err(Error::Validation("nearest-patch search over an empty dataset".into()));
    }
    if j >= bank.num_prototypes {
        return Err(Error::Config(format!("prototype index {j} out of range (M = {})", bank.num_prototypes)));
    }
    let w = bank.prototype(j);
    let mut per_window = Vec::with_capacity(dataset.len());
    for entry in dataset {
        let patches = extract_patches(&entry.features, bank.patch_len)?;
        if entry.features.cols != bank.channels {
            return Err(Error::Shape("feature/prototype channel mismatch".into()));
        }
        let mut best: Option<(usize, f64)> = None;
        for (p, patch) in patches.iter().enumerate() {
            let d = squared_distance(patch, w);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((p, d));
            }
        }
        let (patch_index, distance) = best.expect("at least one patch");
        per_window.push(PatchMatch { window: entry.window.clone(), patch_index, distance });
    }
    per_window.sort_by(match_order);
    per_window.truncate(n);
    Ok(per_window)
}

/// Global minimizer of the distance to prototype `j` over all windows and patches.
pub fn nearest_patch(bank: &PrototypeBank, j: usize, dataset: &[FeatureEntry]) -> Result<PatchMatch> {
    Ok(nearest_patches(bank, j, dataset, 1)?.remove(0))
}

/// Replace every prototype by its nearest training patch and record the source.
pub fn project_prototypes(bank: &PrototypeBank, dataset: &[FeatureEntry]) -> Result<PrototypeBank> {
    let mut out = bank.clone();
    let n = bank.prototype_size();
    for j in 0..bank.num_prototypes {
        let m = nearest_patch(bank, j, dataset)?;
        let entry = dataset
            .iter()
            .find(|e| e.window == m.window)
            .expect("match refers to a dataset window");
        let c = entry.features.cols;
        let patch = &entry.features.data[m.patch_index * c..m.patch_index * c + n];
        out.values[j * n..(j + 1) * n].copy_from_slice(patch);
        out.meta[j] = PrototypeMeta {
            projected: true,
            source: Some(PrototypeSource { window: m.window, patch_index: m.patch_index }),
            occlusion_interval: None,
        };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    pub win_s: f64,
    pub stride_s: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig { win_s: 1.0, stride_s: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionResult {
    pub onset_s: f64,
    pub duration_s: f64,
    /// Increase of the prototype's minimum distance for each occlusion position.
    pub sensitivity: Vec<f64>,
}

/// Occlusion positions as `(start, len)` in samples.
pub fn occlusion_positions(n_samples: usize, sampling_hz: usize, occl: &OcclusionConfig) -> Result<Vec<(usize, usize)>> {
    if !(occl.win_s > 0.0 && occl.stride_s > 0.0) {
        return Err(Error::Config("occlusion window and stride must be positive".into()));
    }
    let win = (occl.win_s * sampling_hz as f64).round() as usize;
    let stride = ((occl.stride_s * sampling_hz as f64).round() as usize).max(1);
    if win == 0 || win > n_samples {
        return Err(Error::Config(format!(
            "occlusion window of {} s does not fit a {} s signal",
            occl.win_s,
            n_samples as f64 / sampling_hz as f64
        )));
    }
    Ok((0..=(n_samples - win) / stride).map(|i| (i * stride, win)).collect())
}

/// Occlusion sensitivity of every prototype at once: each position zeroes a
/// segment of the signal and records how much each prototype's minimum
/// patch distance grows.
pub fn occlusion_sensitivity(
    bank: &PrototypeBank,
    signal: &[f64],
    sampling_hz: usize,
    occl: &OcclusionConfig,
    features: impl Fn(&[f64]) -> Result<Mat>,
) -> Result<Vec<OcclusionResult>> {
    let positions = occlusion_positions(signal.len(), sampling_hz, occl)?;
    let base = distance_map(&features(signal)?, bank)?;
    let base_min: Vec<f64> = (0..bank.num_prototypes).map(|j| base.row_min(j).1).collect();
    let mut curves = vec![Vec::with_capacity(positions.len()); bank.num_prototypes];
    let mut buf = signal.to_vec();
    for &(start, len) in &positions {
        buf[start..start + len].iter_mut().for_each(|v| *v = 0.0);
        let d = distance_map(&features(&buf)?, bank)?;
        for (j, curve) in curves.iter_mut().enumerate() {
            curve.push(d.row_min(j).1 - base_min[j]);
        }
        buf[start..start + len].copy_from_slice(&signal[start..start + len]);
    }
    let hz = sampling_hz as f64;
    Ok(curves
        .into_iter()
        .map(|curve| {
            let best = curve
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > curve[b] { i } else { b });
            let (start, len) = positions[best];
            OcclusionResult { onset_s: start as f64 / hz, duration_s: len as f64 / hz, sensitivity: curve }
        })
        .collect())
}

pub fn occlusion_localize(
    bank: &PrototypeBank,
    j: usize,
    signal: &[f64],
    sampling_hz: usize,
    occl: &OcclusionConfig,
    features: impl Fn(&[f64]) -> Result<Mat>,
) -> Result<OcclusionResult> {
    if j >= bank.num_prototypes {
        return Err(Error::Config(format!("prototype index {j} out of range")));
    }
    Ok(occlusion_sensitivity(bank, signal, sampling_hz, occl, features)?.swap_remove(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wref(s: &str, e: usize) -> WindowRef {
        WindowRef { subject_id: s.into(), epoch_index: e }
    }

    #[test]
    fn patch_counts() {
        let s = Mat::from_vec(5, 2, (0..10).map(|v| v as f64).collect());
        assert_eq!(extract_patches(&s, 1).unwrap().len(), 5);
        let p2 = extract_patches(&s, 2).unwrap();
        assert_eq!(p2.len(), 4);
        assert_eq!(p2[1], &[2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(extract_patches(&s, 6), Err(Error::Shape(_))));
        let joined: Vec<f64> = extract_patches(&s, 1).unwrap().concat();
        assert_eq!(joined, s.data);
    }

    #[test]
    fn hand_distance_row() {
        let s = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 0.0, 3.0, 4.0]);
        let bank = PrototypeBank::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(distance_map(&s, &bank).unwrap().values, vec![0.0, 1.0, 20.0]);
        let wrong = PrototypeBank::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(distance_map(&s, &wrong), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn distance_map_equals_double_loop(
            k in 2usize..8, c in 1usize..5, m in 1usize..5, k1 in 1usize..3, seed in 0u64..1000
        ) {
            prop_assume!(k1 <= k);
            let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); ((x >> 33) as f64 / (1u64 << 31) as f64) - 0.5 };
            let s = Mat::from_vec(k, c, (0..k * c).map(|_| next()).collect());
            let bank = PrototypeBank::new(m, k1, c, (0..m * k1 * c).map(|_| next()).collect()).unwrap();
            let d = distance_map(&s, &bank).unwrap();
            for j in 0..m {
                for p in 0..=(k - k1) {
                    let mut acc = 0.0;
                    for t in 0..k1 {
                        for ch in 0..c {
                            let diff = s.at(p + t, ch) - bank.values[(j * k1 + t) * c + ch];
                            acc += diff * diff;
                        }
                    }
                    prop_assert_eq!(d.values[j * d.num_patches + p], acc);
                    prop_assert!(acc >= 0.0);
                }
            }
        }
    }

    fn toy_dataset(n: usize) -> Vec<FeatureEntry> {
        (0..n)
            .map(|i| FeatureEntry {
                window: wref(&format!("s{}", i % 3), i),
                features: Mat::from_vec(4, 2, (0..8).map(|v| ((v * 7 + i * 13) % 17) as f64 * 0.1).collect()),
            })
            .collect()
    }

    #[test]
    fn nearest_patch_agrees_with_brute_force() {
        let data = toy_dataset(50);
        let bank = PrototypeBank::new(3, 1, 2, vec![0.3, 0.9, 1.2, 0.1, 0.0, 0.0]).unwrap();
        for j in 0..3 {
            let got = nearest_patch(&bank, j, &data).unwrap();
            let mut best: Option<PatchMatch> = None;
            for e in &data {
                for p in 0..4 {
                    let d = squared_distance(e.features.row(p), bank.prototype(j));
                    let cand = PatchMatch { window: e.window.clone(), patch_index: p, distance: d };
                    if best.as_ref().is_none_or(|b| match_order(&cand, b) == Ordering::Less) {
                        best = Some(cand);
                    }
                }
            }
            assert_eq!(got, best.unwrap());
        }
    }

    #[test]
    fn single_window_dataset_returns_argmin() {
        let data = vec![FeatureEntry { window: wref("a", 0), features: Mat::from_vec(3, 1, vec![5.0, 1.0, 2.0]) }];
        let bank = PrototypeBank::new(1, 1, 1, vec![1.5]).unwrap();
        let m = nearest_patch(&bank, 0, &data).unwrap();
        assert_eq!(m.patch_index, 1);
        assert_eq!(m.distance, 0.25);
        assert!(nearest_patch(&bank, 0, &[]).is_err());
    }

    #[test]
    fn ties_break_by_window_then_patch() {
        let f = Mat::from_vec(2, 1, vec![1.0, 1.0]);
        let data = vec![
            FeatureEntry { window: wref("b", 0), features: f.clone() },
            FeatureEntry { window: wref("a", 5), features: f.clone() },
            FeatureEntry { window: wref("a", 2), features: f },
        ];
        let bank = PrototypeBank::new(1, 1, 1, vec![1.0]).unwrap();
        let m = nearest_patch(&bank, 0, &data).unwrap();
        assert_eq!((m.window, m.patch_index), (wref("a", 2), 0));
    }

    #[test]
    fn projection_is_a_fixed_point() {
        let data = toy_dataset(20);
        let bank = PrototypeBank::new(3, 1, 2, vec![0.3, 0.9, 1.2, 0.1, 0.0, 0.0]).unwrap();
        let once = project_prototypes(&bank, &data).unwrap();
        assert!(once.is_projected());
        for j in 0..3 {
            assert_eq!(nearest_patch(&once, j, &data).unwrap().distance, 0.0);
        }
        let twice = project_prototypes(&once, &data).unwrap();
        assert_eq!(once.values, twice.values);
    }

    #[test]
    fn top_n_keeps_one_patch_per_window() {
        let data = toy_dataset(10);
        let bank = PrototypeBank::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let top = nearest_patches(&bank, 0, &data, 3).unwrap();
        assert_eq!(top.len(), 3);
        assert!(top.windows(2).all(|w| w[0].distance <= w[1].distance));
        let mut seen: Vec<_> = top.iter().map(|m| m.window.clone()).collect();
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }

    fn identity_features(x: &[f64]) -> Result<Mat> {
        Ok(Mat::column(x))
    }

    #[test]
    fn occlusion_curve_length_and_peak() {
        // 10 s at 100 Hz; a bump at [4 s, 5 s) is the only close match to the prototype
        let mut signal = vec![0.0; 1000];
        signal[400..500].iter_mut().for_each(|v| *v = 3.0);
        let bank = PrototypeBank::new(1, 1, 1, vec![3.0]).unwrap();
        let occl = OcclusionConfig { win_s: 1.0, stride_s: 0.25 };
        let r = occlusion_localize(&bank, 0, &signal, 100, &occl, identity_features).unwrap();
        // floor((10 - 1) / 0.25) + 1
        assert_eq!(r.sensitivity.len(), 37);
        assert!((r.onset_s - 4.0).abs() < 1e-9);
        assert_eq!(r.duration_s, 1.0);
        // occluding parts of the already-zero background changes nothing
        assert_eq!(r.sensitivity[0], 0.0);
    }

    #[test]
    fn whole_signal_occlusion_dominates_single_windows() {
        let mut signal = vec![0.1; 100];
        signal[30..45].iter_mut().for_each(|v| *v = 2.0);
        let bank = PrototypeBank::new(1, 1, 1, vec![2.0]).unwrap();
        let r = occlusion_localize(&bank, 0, &signal, 10, &OcclusionConfig::default(), identity_features).unwrap();
        let full = occlusion_localize(&bank, 0, &signal, 10, &OcclusionConfig { win_s: 10.0, stride_s: 1.0 }, identity_features).unwrap();
        let max_single = r.sensitivity.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(full.sensitivity.len(), 1);
        assert!(full.sensitivity[0] >= max_single);
    }

    #[test]
    fn oversized_occlusion_window_is_config_error() {
        let bank = PrototypeBank::new(1, 1, 1, vec![0.0]).unwrap();
        let occl = OcclusionConfig { win_s: 20.0, stride_s: 1.0 };
        assert!(matches!(
            occlusion_localize(&bank, 0, &[0.0; 100], 10, &occl, identity_features),
            Err(Error::Config(_))
        ));
    }
}
