//! Synthetic single-channel EEG with planted, logged stage waveforms.
//!
//! Each epoch is 1/f background noise plus waveform events drawn from a
//! per-stage recipe: Wake carries alpha bursts (plus blinks and eye-movement
//! deflections), N1 low-amplitude mixed-frequency activity, N2 spindles and
//! K-complexes, N3 delta (and occasional spindles), REM sawtooth bursts and
//! eye-movement deflections. Every planted event is written to a sidecar
//! log so tests can check what a model attends to.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, Dataset, Recording, Stage, NUM_STAGES};
use crate::{Error, Result};

pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    Alpha,
    Lamf,
    Spindle,
    Kcomplex,
    Delta,
    Sawtooth,
    RemArtifact,
    BlinkArtifact,
}

impl Waveform {
    pub const ALL: [Waveform; 8] = [
        Waveform::Alpha,
        Waveform::Lamf,
        Waveform::Spindle,
        Waveform::Kcomplex,
        Waveform::Delta,
        Waveform::Sawtooth,
        Waveform::RemArtifact,
        Waveform::BlinkArtifact,
    ];

    pub fn template(self) -> WaveformTemplate {
        use Waveform::*;
        let (freq, dur, amp) = match self {
            Alpha => ((8.0, 13.0), (2.0, 6.0), (0.8, 1.2)),
            Lamf => ((4.0, 7.0), (2.0, 6.0), (0.35, 0.6)),
            Spindle => ((12.0, 14.0), (0.5, 2.0), (0.8, 1.4)),
            Kcomplex => ((0.9, 1.6), (0.6, 1.0), (2.0, 3.0)),
            Delta => ((0.5, 2.0), (3.0, 8.0), (1.5, 2.5)),
            Sawtooth => ((2.0, 6.0), (1.0, 3.0), (0.6, 1.0)),
            RemArtifact => ((1.0, 2.5), (0.2, 0.5), (1.5, 2.5)),
            BlinkArtifact => ((0.0, 0.0), (0.4, 0.8), (2.0, 3.0)),
        };
        WaveformTemplate { name: self, freq_range: freq, duration_range: dur, amplitude_range: amp }
    }

    pub fn name(self) -> &'static str {
        use Waveform::*;
        match self {
            Alpha => "alpha",
            Lamf => "lamf",
            Spindle => "spindle",
            Kcomplex => "kcomplex",
            Delta => "delta",
            Sawtooth => "sawtooth",
            RemArtifact => "rem_artifact",
            BlinkArtifact => "blink_artifact",
        }
    }

    /// Waveform families that characterize a stage.
    pub fn families_of(stage: Stage) -> &'static [Waveform] {
        use Waveform::*;
        match stage {
            Stage::Wake => &[Alpha, BlinkArtifact, RemArtifact],
            Stage::N1 => &[Lamf],
            Stage::N2 => &[Spindle, Kcomplex],
            Stage::N3 => &[Delta, Spindle],
            Stage::Rem => &[Sawtooth, RemArtifact],
        }
    }
}

impl fmt::Display for Waveform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformTemplate {
    pub name: Waveform,
    /// Hz; for the K-complex this is the rate of its slow positive lobe.
    pub freq_range: (f64, f64),
    pub duration_range: (f64, f64),
    pub amplitude_range: (f64, f64),
}

/// Per-stage occurrence probabilities and coverage fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageMix {
    pub wake_alpha_coverage: (f64, f64),
    pub wake_blink_prob: f64,
    pub wake_eye_movement_prob: f64,
    pub n1_lamf_coverage: (f64, f64),
    pub n2_spindles: (usize, usize),
    pub n2_kcomplex_prob: f64,
    pub n3_delta_coverage: (f64, f64),
    pub n3_spindle_prob: f64,
    pub rem_sawtooth_bursts: (usize, usize),
    pub rem_eye_movement_prob: f64,
    /// Row-stochastic stage transition matrix, rows/cols in stage-code order.
    pub transitions: [[f64; NUM_STAGES]; NUM_STAGES],
}

impl Default for StageMix {
    fn default() -> Self {
        StageMix {
            wake_alpha_coverage: (0.55, 0.8),
            wake_blink_prob: 0.7,
            wake_eye_movement_prob: 0.3,
            n1_lamf_coverage: (0.55, 0.8),
            n2_spindles: (1, 3),
            n2_kcomplex_prob: 0.6,
            n3_delta_coverage: (0.3, 0.6),
            n3_spindle_prob: 0.25,
            rem_sawtooth_bursts: (2, 4),
            rem_eye_movement_prob: 0.8,
            transitions: [
                [0.85, 0.10, 0.03, 0.00, 0.02],
                [0.08, 0.70, 0.18, 0.00, 0.04],
                [0.02, 0.04, 0.82, 0.08, 0.04],
                [0.01, 0.00, 0.12, 0.87, 0.00],
                [0.04, 0.04, 0.04, 0.00, 0.88],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub subjects: usize,
    pub epochs_per_subject: usize,
    pub noise_sd: f64,
    pub epoch_seconds: usize,
    pub sampling_hz: usize,
    pub stage_mix: StageMix,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            subjects: 6,
            epochs_per_subject: 200,
            noise_sd: 0.3,
            epoch_seconds: 30,
            sampling_hz: 100,
            stage_mix: StageMix::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.epochs_per_subject == 0 {
            return Err(Error::Config("subjects and epochs_per_subject must be positive".into()));
        }
        if self.epoch_seconds < 10 || self.sampling_hz < 40 {
            return Err(Error::Config("synthetic epochs need >= 10 s at >= 40 Hz to host the waveform bank".into()));
        }
        for (i, row) in self.stage_mix.transitions.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Config(format!("transition row {i} is not a distribution")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub template: Waveform,
    pub onset_s: f64,
    pub duration_s: f64,
}

impl PlantedEvent {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

/// One sidecar line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEvents {
    pub subject_id: String,
    pub epoch_index: usize,
    pub stage: u8,
    pub events: Vec<PlantedEvent>,
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Pinkish noise: white Gaussian through Kellet's 1/f filter, rescaled to `sd`.
fn pink_noise(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let v = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            v
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { sd / var.sqrt() } else { 0.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    out
}

fn hann(i: usize, n: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
}

/// Samples of one waveform event of `n` samples at `hz`.
fn render(rng: &mut impl Rng, kind: Waveform, n: usize, hz: f64) -> Vec<f64> {
    let t = kind.template();
    let amp = uniform(rng, t.amplitude_range);
    let freq = uniform(rng, t.freq_range);
    let phase = rng.random_range(0.0..2.0 * PI);
    match kind {
        Waveform::Alpha | Waveform::Spindle | Waveform::Delta => {
            (0..n).map(|i| amp * hann(i, n) * (2.0 * PI * freq * i as f64 / hz + phase).sin()).collect()
        }
        Waveform::Lamf => {
            // two components inside the band give the mixed-frequency look
            let f2 = uniform(rng, t.freq_range);
            (0..n)
                .map(|i| {
                    let x = i as f64 / hz;
                    amp * hann(i, n) * (0.65 * (2.0 * PI * freq * x + phase).sin() + 0.35 * (2.0 * PI * f2 * x).sin())
                })
                .collect()
        }
        Waveform::Kcomplex => {
            // sharp negative deflection (first ~30%) then slower positive lobe
            let split = (n as f64 * 0.3).round().max(1.0) as usize;
            (0..n)
                .map(|i| {
                    if i < split {
                        -amp * (PI * i as f64 / split as f64).sin()
                    } else {
                        let m = n - split;
                        0.6 * amp * (PI * (i - split) as f64 / m as f64).sin()
                    }
                })
                .collect()
        }
        Waveform::Sawtooth => {
            // slow rise over 80% of each cycle, fast fall
            (0..n)
                .map(|i| {
                    let cycle = (freq * i as f64 / hz + phase / (2.0 * PI)).fract();
                    let v = if cycle < 0.8 { cycle / 0.8 * 2.0 - 1.0 } else { 1.0 - (cycle - 0.8) / 0.2 * 2.0 };
                    amp * hann(i, n).sqrt() * v
                })
                .collect()
        }
        Waveform::RemArtifact => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (0..n).map(|i| sign * amp * (PI * i as f64 / n as f64).sin()).collect()
        }
        Waveform::BlinkArtifact => {
            // fast rise over 15%, exponential decay after
            let rise = ((n as f64) * 0.15).round().max(1.0) as usize;
            let tau = (n - rise) as f64 / 3.0;
            (0..n)
                .map(|i| if i < rise { amp * i as f64 / rise as f64 } else { amp * (-((i - rise) as f64) / tau).exp() })
                .collect()
        }
    }
}

struct EpochBuilder<'a, R: Rng> {
    rng: &'a mut R,
    hz: f64,
    seconds: f64,
    signal: Vec<f64>,
    events: Vec<PlantedEvent>,
}

impl<R: Rng> EpochBuilder<'_, R> {
    fn plant(&mut self, kind: Waveform, onset_s: f64, duration_s: f64) {
        let start = (onset_s * self.hz).round() as usize;
        let n = ((duration_s * self.hz).round() as usize).min(self.signal.len() - start);
        let wave = render(self.rng, kind, n, self.hz);
        for (s, w) in self.signal[start..start + n].iter_mut().zip(wave) {
            *s += w;
        }
        self.events.push(PlantedEvent { template: kind, onset_s: start as f64 / self.hz, duration_s: n as f64 / self.hz });
    }

    /// Bursts totalling `coverage` of the epoch, separated by random gaps.
    fn plant_coverage(&mut self, kind: Waveform, coverage: f64) {
        let t = kind.template();
        let target = coverage * self.seconds;
        let mean_dur = 0.5 * (t.duration_range.0 + t.duration_range.1);
        let count = (target / mean_dur).round().max(1.0) as usize;
        let dur = target / count as f64;
        let weights: Vec<f64> = (0..=count).map(|_| self.rng.random_range(0.2..1.0)).collect();
        let wsum: f64 = weights.iter().sum();
        let free = self.seconds - target;
        let mut cursor = 0.0;
        for w in weights.iter().take(count) {
            cursor += free * w / wsum;
            let onset = (cursor * self.hz).floor() / self.hz;
            self.plant(kind, onset, dur);
            cursor = onset + dur;
        }
    }

    /// `count` isolated events at random non-overlapping positions.
    fn plant_isolated(&mut self, kind: Waveform, count: usize) {
        let t = kind.template();
        for _ in 0..count {
            for _attempt in 0..100 {
                let dur = uniform(self.rng, t.duration_range);
                let onset = self.rng.random_range(0.5..self.seconds - dur - 0.5);
                let onset = (onset * self.hz).floor() / self.hz;
                let overlaps = self.events.iter().any(|e| onset < e.end_s() + 0.25 && e.onset_s < onset + dur + 0.25);
                if !overlaps {
                    self.plant(kind, onset, dur);
                    break;
                }
            }
        }
    }
}

/// One labelled epoch: `(signal, planted events)`.
pub fn generate_epoch(stage: Stage, cfg: &SynthConfig, rng: &mut impl Rng) -> (Vec<f64>, Vec<PlantedEvent>) {
    let hz = cfg.sampling_hz as f64;
    let n = cfg.epoch_seconds * cfg.sampling_hz;
    let signal = pink_noise(rng, n, cfg.noise_sd);
    let mix = &cfg.stage_mix;
    let mut b = EpochBuilder { rng, hz, seconds: cfg.epoch_seconds as f64, signal, events: Vec::new() };
    match stage {
        Stage::Wake => {
            let c = uniform(b.rng, mix.wake_alpha_coverage);
            b.plant_coverage(Waveform::Alpha, c);
            if b.rng.random_bool(mix.wake_blink_prob) {
                let k = b.rng.random_range(1..=2);
                b.plant_isolated(Waveform::BlinkArtifact, k);
            }
            if b.rng.random_bool(mix.wake_eye_movement_prob) {
                b.plant_isolated(Waveform::RemArtifact, 1);
            }
        }
        Stage::N1 => {
            let c = uniform(b.rng, mix.n1_lamf_coverage);
            b.plant_coverage(Waveform::Lamf, c);
        }
        Stage::N2 => {
            let k = b.rng.random_range(mix.n2_spindles.0..=mix.n2_spindles.1);
            b.plant_isolated(Waveform::Spindle, k);
            if b.rng.random_bool(mix.n2_kcomplex_prob) {
                let k = b.rng.random_range(1..=2);
                b.plant_isolated(Waveform::Kcomplex, k);
            }
        }
        Stage::N3 => {
            let c = uniform(b.rng, mix.n3_delta_coverage);
            b.plant_coverage(Waveform::Delta, c);
            if b.rng.random_bool(mix.n3_spindle_prob) {
                b.plant_isolated(Waveform::Spindle, 1);
            }
        }
        Stage::Rem => {
            let k = b.rng.random_range(mix.rem_sawtooth_bursts.0..=mix.rem_sawtooth_bursts.1);
            b.plant_isolated(Waveform::Sawtooth, k);
            if b.rng.random_bool(mix.rem_eye_movement_prob) {
                let k = b.rng.random_range(1..=3);
                b.plant_isolated(Waveform::RemArtifact, k);
            }
        }
    }
    let mut events = b.events;
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    (b.signal, events)
}

/// Stage sequence from the transition chain, starting awake.
pub fn stage_sequence(mix: &StageMix, len: usize, rng: &mut impl Rng) -> Vec<Stage> {
    let mut out = Vec::with_capacity(len);
    let mut cur = 0usize;
    for _ in 0..len {
        out.push(Stage::ALL[cur]);
        let u: f64 = rng.random();
        let row = &mix.transitions[cur];
        let mut acc = 0.0;
        let mut next = NUM_STAGES - 1;
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = i;
                break;
            }
        }
        cur = next;
    }
    out
}

pub fn subject_id(i: usize) -> String {
    format!("S{i:02}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub events: Vec<EpochEvents>,
}

/// Generate every subject in memory. Subject `i` uses stream `i` of the
/// seeded generator, so subjects are independent of each other's length.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut recordings = Vec::with_capacity(cfg.subjects);
    let mut events = Vec::with_capacity(cfg.subjects * cfg.epochs_per_subject);
    for s in 0..cfg.subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s as u64 + 1);
        let id = subject_id(s);
        let gain: f64 = rng.random_range(0.8..1.25);
        let stages = stage_sequence(&cfg.stage_mix, cfg.epochs_per_subject, &mut rng);
        let mut samples = Vec::with_capacity(cfg.epochs_per_subject * cfg.epoch_seconds * cfg.sampling_hz);
        for (e, &stage) in stages.iter().enumerate() {
            let (sig, ev) = generate_epoch(stage, cfg, &mut rng);
            samples.extend(sig.iter().map(|v| (v * gain) as f32));
            events.push(EpochEvents { subject_id: id.clone(), epoch_index: e, stage: stage.code(), events: ev });
        }
        recordings.push(Recording { subject_id: id, samples, labels: stages.iter().map(|s| s.code()).collect() });
    }
    Ok(SyntheticData {
        dataset: Dataset { epoch_seconds: cfg.epoch_seconds, sampling_hz: cfg.sampling_hz, recordings },
        events,
    })
}

/// Write the dataset container plus the event sidecar into `dir`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<SyntheticData> {
    let data = generate(cfg)?;
    save_dataset(dir, &data.dataset)?;
    write_events(&dir.join(EVENTS_FILE), &data.events)?;
    Ok(data)
}

pub fn write_events(path: &Path, events: &[EpochEvents]) -> Result<()> {
    let mut text = String::new();
    for e in events {
        text.push_str(&serde_json::to_string(e).expect("event serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<EpochEvents>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// Fraction of the epoch covered by events of `kind`.
pub fn coverage(events: &[PlantedEvent], kind: Waveform, epoch_seconds: f64) -> f64 {
    events.iter().filter(|e| e.template == kind).map(|e| e.duration_s).sum::<f64>() / epoch_seconds
}
