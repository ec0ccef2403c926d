//! Dataset container, per-recording normalization, L-epoch windowing and
//! subject-wise fold assignment.
//!
//! On-disk layout (a directory):
//!
//! ```text
//! manifest.json          {"format": "wavesense-dataset", "version": 1,
//!                         "epoch_seconds": E, "sampling_hz": F,
//!                         "records": [{"subject_id", "signal_file",
//!                                      "labels_file", "num_epochs"}, ...]}
//! <subject>.signal.f32   num_epochs * E * F little-endian IEEE-754 binary32
//! <subject>.labels.u8    num_epochs unsigned bytes, stage codes 0..=4
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_STAGES: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "wavesense-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Stage {
    Wake = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl Stage {
    pub const ALL: [Stage; NUM_STAGES] = [Stage::Wake, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    pub fn from_code(code: u8) -> Option<Stage> {
        Stage::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Wake => "Wake",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub epoch_seconds: usize,
    pub sampling_hz: usize,
    pub window_len: usize,
    pub num_classes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { epoch_seconds: 30, sampling_hz: 100, window_len: 10, num_classes: NUM_STAGES }
    }
}

impl DatasetConfig {
    pub fn samples_per_epoch(&self) -> usize {
        self.epoch_seconds * self.sampling_hz
    }

    pub fn window_samples(&self) -> usize {
        self.samples_per_epoch() * self.window_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.epoch_seconds == 0 || self.sampling_hz == 0 {
            return Err(Error::Config("epoch_seconds and sampling_hz must be positive".into()));
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be at least 1".into()));
        }
        if self.num_classes != NUM_STAGES {
            return Err(Error::Config(format!("num_classes is fixed at {NUM_STAGES}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub samples: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Recording {
    pub fn num_epochs(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self, samples_per_epoch: usize) -> Result<()> {
        if self.samples.len() != self.labels.len() * samples_per_epoch {
            return Err(Error::Format(format!(
                "recording {}: {} samples for {} epochs of {} samples",
                self.subject_id,
                self.samples.len(),
                self.labels.len(),
                samples_per_epoch
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| Stage::from_code(l).is_none()) {
            return Err(Error::Validation(format!("recording {}: epoch {i} has label {l} outside 0..=4", self.subject_id)));
        }
        Ok(())
    }
}

/// Stable identity of a window: the recording and the index of its last epoch.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowRef {
    pub subject_id: String,
    pub epoch_index: usize,
}

impl fmt::Display for WindowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.subject_id, self.epoch_index)
    }
}

/// `L` consecutive epochs of one recording, labelled with the last epoch's stage.
#[derive(Clone, Debug)]
pub struct EpochWindow {
    pub window: WindowRef,
    pub label: u8,
    source: Arc<Vec<f64>>,
    start: usize,
    len: usize,
}

impl EpochWindow {
    pub fn new(window: WindowRef, label: u8, signal: Vec<f64>) -> Self {
        let len = signal.len();
        EpochWindow { window, label, source: Arc::new(signal), start: 0, len }
    }

    pub fn signal(&self) -> &[f64] {
        &self.source[self.start..self.start + self.len]
    }

    pub fn subject_id(&self) -> &str {
        &self.window.subject_id
    }

    pub fn epoch_index(&self) -> usize {
        self.window.epoch_index
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    subject_id: String,
    signal_file: String,
    labels_file: String,
    num_epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    epoch_seconds: usize,
    sampling_hz: usize,
    records: Vec<ManifestRecord>,
}

/// Recordings plus the epoch geometry they were stored with.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub epoch_seconds: usize,
    pub sampling_hz: usize,
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn samples_per_epoch(&self) -> usize {
        self.epoch_seconds * self.sampling_hz
    }

    pub fn subjects(&self) -> Vec<String> {
        self.recordings.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn safe_file_stem(subject: &str) -> String {
    subject.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spe = ds.samples_per_epoch();
    let mut records = Vec::with_capacity(ds.recordings.len());
    let mut used = BTreeSet::new();
    for r in &ds.recordings {
        r.validate(spe)?;
        let stem = safe_file_stem(&r.subject_id);
        if !used.insert(stem.clone()) {
            return Err(Error::Validation(format!("duplicate subject file name {stem}")));
        }
        let signal_file = format!("{stem}.signal.f32");
        let labels_file = format!("{stem}.labels.u8");
        let bytes: Vec<u8> = r.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join(&signal_file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(&labels_file);
        fs::write(&p, &r.labels).map_err(|e| Error::io(&p, e))?;
        records.push(ManifestRecord { subject_id: r.subject_id.clone(), signal_file, labels_file, num_epochs: r.num_epochs() });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        epoch_seconds: ds.epoch_seconds,
        sampling_hz: ds.sampling_hz,
        records,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Load a dataset from its manifest (or the directory holding it).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {} v{}", manifest.format, manifest.version)));
    }
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let spe = manifest.epoch_seconds * manifest.sampling_hz;
    if spe == 0 {
        return Err(Error::Format("epoch_seconds * sampling_hz must be positive".into()));
    }
    let mut recordings = Vec::with_capacity(manifest.records.len());
    for rec in manifest.records {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::Format(format!("record {}: cannot read {}: {e}", rec.subject_id, p.display())))
        };
        let raw = read(&rec.signal_file)?;
        if raw.len() % 4 != 0 {
            return Err(Error::Format(format!("{}: length {} is not a multiple of 4", rec.signal_file, raw.len())));
        }
        let samples: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let labels = read(&rec.labels_file)?;
        if labels.len() != rec.num_epochs {
            return Err(Error::Format(format!(
                "record {}: manifest says {} epochs, labels file has {}",
                rec.subject_id,
                rec.num_epochs,
                labels.len()
            )));
        }
        let r = Recording { subject_id: rec.subject_id, samples, labels };
        r.validate(spe)?;
        recordings.push(r);
    }
    Ok(Dataset { epoch_seconds: manifest.epoch_seconds, sampling_hz: manifest.sampling_hz, recordings })
}

/// Per-recording z-score (population standard deviation). A constant
/// recording becomes all zeros.
pub fn normalize_recording(r: &Recording) -> Result<Recording> {
    if r.samples.is_empty() {
        return Err(Error::Validation(format!("recording {} has no samples", r.subject_id)));
    }
    let n = r.samples.len() as f64;
    let mean = r.samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = r.samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let samples = if var > 0.0 {
        let sd = var.sqrt();
        r.samples.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect()
    } else {
        log::warn!("recording {} is constant; normalized to zeros", r.subject_id);
        vec![0.0; r.samples.len()]
    };
    Ok(Recording { subject_id: r.subject_id.clone(), samples, labels: r.labels.clone() })
}

/// Sliding windows of `L` epochs, stride one epoch. Window `i` spans epochs
/// `i..=i+L-1` and is labelled with epoch `i+L-1`.
pub fn make_windows(r: &Recording, cfg: &DatasetConfig) -> Vec<EpochWindow> {
    let n = r.num_epochs();
    let l = cfg.window_len;
    if n < l {
        log::warn!("recording {} has {n} epochs, fewer than the window length {l}; no windows", r.subject_id);
        return Vec::new();
    }
    let spe = cfg.samples_per_epoch();
    let source: Arc<Vec<f64>> = Arc::new(r.samples.iter().map(|&v| v as f64).collect());
    (0..=n - l)
        .map(|i| {
            let last = i + l - 1;
            EpochWindow {
                window: WindowRef { subject_id: r.subject_id.clone(), epoch_index: last },
                label: r.labels[last],
                source: Arc::clone(&source),
                start: i * spe,
                len: l * spe,
            }
        })
        .collect()
}

/// Normalize every recording of `ds` and window it.
pub fn prepare_windows(ds: &Dataset, cfg: &DatasetConfig) -> Result<Vec<EpochWindow>> {
    if ds.samples_per_epoch() != cfg.samples_per_epoch() {
        return Err(Error::Config(format!(
            "dataset epochs have {} samples, config expects {}",
            ds.samples_per_epoch(),
            cfg.samples_per_epoch()
        )));
    }
    let mut out = Vec::new();
    for r in &ds.recordings {
        out.extend(make_windows(&normalize_recording(r)?, cfg));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_count: usize,
    pub subject_to_fold: BTreeMap<String, usize>,
    /// Per fold, the training-pool subjects held out for validation.
    pub held_out_validation: Vec<Vec<String>>,
}

impl FoldAssignment {
    pub fn test_subjects(&self, fold: usize) -> Vec<String> {
        self.subject_to_fold.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.clone()).collect()
    }

    pub fn validation_subjects(&self, fold: usize) -> &[String] {
        &self.held_out_validation[fold]
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        let val: BTreeSet<&String> = self.held_out_validation[fold].iter().collect();
        self.subject_to_fold
            .iter()
            .filter(|(s, &f)| f != fold && !val.contains(s))
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Checks the partition and per-fold disjointness properties.
    pub fn audit(&self) -> Result<()> {
        for fold in 0..self.fold_count {
            let test: BTreeSet<String> = self.test_subjects(fold).into_iter().collect();
            let train: BTreeSet<String> = self.train_subjects(fold).into_iter().collect();
            let val: BTreeSet<String> = self.held_out_validation[fold].iter().cloned().collect();
            if test.is_empty() {
                return Err(Error::Validation(format!("fold {fold} has no test subjects")));
            }
            if !test.is_disjoint(&val) || !test.is_disjoint(&train) || !train.is_disjoint(&val) {
                return Err(Error::Validation(format!("fold {fold}: overlapping subject sets")));
            }
        }
        Ok(())
    }
}

pub fn assign_folds(subjects: &[String], k: usize, val_subjects: usize, seed: u64) -> Result<FoldAssignment> {
    let mut unique: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > unique.len() {
        return Err(Error::Config(format!("{k} folds requested for {} subjects", unique.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let subject_to_fold: BTreeMap<String, usize> = unique.iter().enumerate().map(|(i, s)| (s.clone(), i % k)).collect();
    let mut held_out_validation = Vec::with_capacity(k);
    for fold in 0..k {
        let mut pool: Vec<String> = unique.iter().filter(|s| subject_to_fold[*s] != fold).cloned().collect();
        if val_subjects >= pool.len() {
            return Err(Error::Config(format!(
                "fold {fold}: {val_subjects} validation subjects leave no training subject out of {}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        let mut val: Vec<String> = pool.into_iter().take(val_subjects).collect();
        val.sort();
        held_out_validation.push(val);
    }
    Ok(FoldAssignment { fold_count: k, subject_to_fold, held_out_validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recording(id: &str, epochs: usize, spe: usize) -> Recording {
        Recording {
            subject_id: id.into(),
            samples: (0..epochs * spe).map(|i| (i % 17) as f32 * 0.25 - 1.0).collect(),
            labels: (0..epochs).map(|i| (i % 5) as u8).collect(),
        }
    }

    #[test]
    fn load_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset { epoch_seconds: 30, sampling_hz: 100, recordings: vec![recording("s1", 20, 3000)] };
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.recordings[0].samples.len(), 60_000);
        assert_eq!(back.recordings[0].labels.len(), 20);
        assert_eq!(back, ds);
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = Dataset { epoch_seconds: 2, sampling_hz: 5, recordings: vec![recording("x", 4, 10), recording("y", 3, 10)] };
        save_dataset(a.path(), &ds).unwrap();
        save_dataset(b.path(), &load_dataset(a.path()).unwrap()).unwrap();
        for name in [MANIFEST_FILE, "x.signal.f32", "x.labels.u8", "y.signal.f32", "y.labels.u8"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn missing_record_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset { epoch_seconds: 1, sampling_hz: 4, recordings: vec![recording("a", 2, 4)] };
        save_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("a.signal.f32")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
        assert!(matches!(load_dataset(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn length_mismatch_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset { epoch_seconds: 1, sampling_hz: 4, recordings: vec![recording("a", 2, 4)] };
        save_dataset(dir.path(), &ds).unwrap();
        fs::write(dir.path().join("a.signal.f32"), [0u8; 12]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
        save_dataset(dir.path(), &ds).unwrap();
        fs::write(dir.path().join("a.labels.u8"), [1u8, 7]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("epoch 1"));
    }

    #[test]
    fn zscore_examples() {
        let r = Recording { subject_id: "a".into(), samples: vec![1.0, 2.0, 3.0], labels: vec![] };
        let n = normalize_recording(&r).unwrap();
        let mean: f64 = n.samples.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        let sd = (n.samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((sd - 1.0).abs() < 1e-6);
        let twice = normalize_recording(&n).unwrap();
        for (a, b) in n.samples.iter().zip(&twice.samples) {
            assert!((a - b).abs() < 1e-6);
        }
        let flat = Recording { subject_id: "z".into(), samples: vec![0.0; 8], labels: vec![] };
        assert!(normalize_recording(&flat).unwrap().samples.iter().all(|&v| v == 0.0));
        let empty = Recording { subject_id: "e".into(), samples: vec![], labels: vec![] };
        assert!(normalize_recording(&empty).is_err());
    }

    #[test]
    fn window_examples() {
        let cfg = DatasetConfig { epoch_seconds: 1, sampling_hz: 4, window_len: 10, num_classes: 5 };
        let r = recording("a", 20, 4);
        let w = make_windows(&r, &cfg);
        assert_eq!(w.len(), 11);
        assert_eq!(w[0].label, r.labels[9]);
        assert_eq!(w[0].epoch_index(), 9);
        assert_eq!(w[3].signal(), &r.samples[12..52].iter().map(|&v| v as f64).collect::<Vec<_>>()[..]);
        let single = make_windows(&r, &DatasetConfig { window_len: 1, ..cfg.clone() });
        assert_eq!(single.len(), 20);
        assert_eq!(single[5].signal().len(), 4);
        assert!(make_windows(&recording("b", 5, 4), &cfg).is_empty());
    }

    proptest! {
        #[test]
        fn window_count_is_n_minus_l_plus_one(n in 1usize..40, l in 1usize..12) {
            let cfg = DatasetConfig { epoch_seconds: 1, sampling_hz: 2, window_len: l, num_classes: 5 };
            let w = make_windows(&recording("p", n, 2), &cfg);
            prop_assert_eq!(w.len(), if n >= l { n - l + 1 } else { 0 });
            for win in &w {
                prop_assert_eq!(win.signal().len(), 2 * l);
            }
        }

        #[test]
        fn folds_partition_subjects(n in 3usize..25, seed in 0u64..500, kf in 0.0f64..1.0) {
            let subjects: Vec<String> = (0..n).map(|i| format!("S{i:02}")).collect();
            let k = 2 + ((n - 2) as f64 * kf) as usize;
            let val = usize::from(n - n.div_ceil(k) > 1);
            let f = assign_folds(&subjects, k, val, seed).unwrap();
            f.audit().unwrap();
            let mut all: Vec<String> = (0..k).flat_map(|i| f.test_subjects(i)).collect();
            all.sort();
            prop_assert_eq!(all, subjects.clone());
            prop_assert_eq!(assign_folds(&subjects, k, val, seed).unwrap(), f);
        }
    }

    #[test]
    fn leave_one_subject_out() {
        let subjects: Vec<String> = (0..20).map(|i| format!("S{i:02}")).collect();
        let f = assign_folds(&subjects, 20, 1, 3).unwrap();
        for fold in 0..20 {
            assert_eq!(f.test_subjects(fold).len(), 1);
            assert_eq!(f.validation_subjects(fold).len(), 1);
            assert_eq!(f.train_subjects(fold).len(), 18);
        }
        assert!(matches!(assign_folds(&subjects, 21, 1, 3), Err(Error::Config(_))));
        assert!(matches!(assign_folds(&subjects[..3], 3, 2, 3), Err(Error::Config(_))));
    }
}
