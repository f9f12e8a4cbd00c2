//! EEG segment records: reaction-time labeling, session selection, the ESB
//! container, leave-one-subject-out folds and a synthetic drifting stream.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    #[default]
    Unlabeled,
    Alert,
    Drowsy,
}

impl Label {
    pub fn code(self) -> i8 {
        match self {
            Label::Unlabeled => -1,
            Label::Alert => 0,
            Label::Drowsy => 1,
        }
    }

    pub fn from_code(code: i8) -> Option<Self> {
        match code {
            -1 => Some(Label::Unlabeled),
            0 => Some(Label::Alert),
            1 => Some(Label::Drowsy),
            _ => None,
        }
    }

    /// Class index for labeled records; Drowsy is the positive class.
    pub fn class(self) -> Option<u8> {
        match self {
            Label::Unlabeled => None,
            Label::Alert => Some(0),
            Label::Drowsy => Some(1),
        }
    }
}

/// One EEG segment, `channels × samples` floats in channel-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRecord {
    pub subject: u16,
    pub session: u16,
    pub trial: u32,
    pub local_rt: f32,
    pub global_rt: f32,
    pub label: Label,
    pub data: Vec<f32>,
}

impl SegmentRecord {
    /// Network input layout `1 × 1 × channels × samples`.
    pub fn to_tensor(&self, channels: usize, samples: usize) -> Result<Tensor4<f32>, crate::nn::NnError> {
        Tensor4::from_vec(Dims::new(1, 1, channels, samples), self.data.clone())
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("record {index}: reaction times must be positive (local {local}, global {global})")]
    NonPositiveRt { index: usize, local: f32, global: f32 },
    #[error("alert RT percentile {0} is outside [0, 100]")]
    Percentile(f64),
    #[error("need at least two subjects for leave-one-subject-out, got {0}")]
    TooFewSubjects(usize),
    #[error("subject {0} listed more than once")]
    DuplicateSubject(u16),
    #[error("invalid synthetic config: {0}")]
    SynthConfig(String),
}

/// How a session's alert reaction time is derived from its local RTs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlertRtRule {
    pub percentile: f64,
    pub alert_factor: f64,
    pub drowsy_factor: f64,
}

impl Default for AlertRtRule {
    fn default() -> Self {
        Self {
            percentile: 5.0,
            alert_factor: 1.5,
            drowsy_factor: 2.5,
        }
    }
}

/// Linear-interpolation percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Band rule for one record given its session's alert RT.
pub fn label_for(local_rt: f64, global_rt: f64, alert_rt: f64, rule: &AlertRtRule) -> Label {
    let lo = rule.alert_factor * alert_rt;
    let hi = rule.drowsy_factor * alert_rt;
    if local_rt < lo && global_rt < lo {
        Label::Alert
    } else if local_rt > hi && global_rt > hi {
        Label::Drowsy
    } else {
        Label::Unlabeled
    }
}

/// Relabels every record from its reaction times; the alert RT is computed
/// per (subject, session).
pub fn label_segments(records: &mut [SegmentRecord], rule: &AlertRtRule) -> Result<(), DataError> {
    if !(0.0..=100.0).contains(&rule.percentile) {
        return Err(DataError::Percentile(rule.percentile));
    }
    let mut sessions: BTreeMap<(u16, u16), Vec<f64>> = BTreeMap::new();
    for (index, r) in records.iter().enumerate() {
        if !(r.local_rt > 0.0 && r.global_rt > 0.0) {
            return Err(DataError::NonPositiveRt {
                index,
                local: r.local_rt,
                global: r.global_rt,
            });
        }
        sessions.entry((r.subject, r.session)).or_default().push(r.local_rt as f64);
    }
    let alert: BTreeMap<(u16, u16), f64> = sessions
        .into_iter()
        .map(|(k, rts)| (k, percentile(&rts, rule.percentile)))
        .collect();
    for r in records.iter_mut() {
        let a = alert[&(r.subject, r.session)];
        r.label = label_for(r.local_rt as f64, r.global_rt as f64, a, rule);
    }
    Ok(())
}

/// Keeps, per subject, the most class-balanced session among those with at
/// least `min_per_class` records in each class. Ties go to the lower
/// session id. Record order is preserved.
pub fn filter_sessions(records: Vec<SegmentRecord>, min_per_class: usize) -> Vec<SegmentRecord> {
    let mut counts: BTreeMap<(u16, u16), (usize, usize)> = BTreeMap::new();
    for r in &records {
        let e = counts.entry((r.subject, r.session)).or_default();
        match r.label {
            Label::Alert => e.0 += 1,
            Label::Drowsy => e.1 += 1,
            Label::Unlabeled => {}
        }
    }
    let mut best: BTreeMap<u16, (f64, u16)> = BTreeMap::new();
    for (&(subject, session), &(a, d)) in &counts {
        if a < min_per_class || d < min_per_class {
            continue;
        }
        let imbalance = (a as f64 - d as f64).abs() / (a + d) as f64;
        let keep = match best.get(&subject) {
            None => true,
            Some(&(b, s)) => imbalance < b || (imbalance == b && session < s),
        };
        if keep {
            best.insert(subject, (imbalance, session));
        }
    }
    records
        .into_iter()
        .filter(|r| best.get(&r.subject).is_some_and(|&(_, s)| s == r.session))
        .collect()
}

/// One leave-one-subject-out split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub target: u16,
    pub train: Vec<u16>,
}

pub fn loso_folds(subjects: &[u16]) -> Result<Vec<Fold>, DataError> {
    let mut set = BTreeSet::new();
    for &s in subjects {
        if !set.insert(s) {
            return Err(DataError::DuplicateSubject(s));
        }
    }
    if set.len() < 2 {
        return Err(DataError::TooFewSubjects(set.len()));
    }
    Ok(set
        .iter()
        .map(|&target| Fold {
            target,
            train: set.iter().copied().filter(|&s| s != target).collect(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// ESB container

pub const ESB_MAGIC: [u8; 4] = *b"ESB1";
pub const ESB_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;
const RECORD_META_LEN: usize = 17;

#[derive(Debug, Error)]
pub enum EsbError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"ESB1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported ESB version {0}")]
    Version(u16),
    #[error("truncated payload: need {needed} bytes, file has {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("record {index} has {got} values, header implies {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("record {index} contains non-finite values")]
    NonFinite { index: usize },
    #[error("record {index} has invalid label code {code}")]
    InvalidLabel { index: usize, code: i8 },
    #[error("{0} unexpected bytes after the last record")]
    Trailing(usize),
}

impl EsbError {
    /// Stable short identifier of the failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            EsbError::Io { .. } => "io",
            EsbError::BadMagic(_) => "bad_magic",
            EsbError::Version(_) => "version_mismatch",
            EsbError::Truncated { .. } => "truncated_payload",
            EsbError::DimMismatch { .. } => "dim_mismatch",
            EsbError::NonFinite { .. } => "non_finite",
            EsbError::InvalidLabel { .. } => "invalid_label",
            EsbError::Trailing(_) => "trailing_bytes",
        }
    }
}

/// Contents of one ESB file.
#[derive(Clone, Debug, PartialEq)]
pub struct EsbData {
    pub channels: u16,
    pub samples: u32,
    pub sample_rate: u32,
    pub records: Vec<SegmentRecord>,
}

impl EsbData {
    pub fn segment_len(&self) -> usize {
        self.channels as usize * self.samples as usize
    }

    pub fn encode(&self) -> Result<Vec<u8>, EsbError> {
        let len = self.segment_len();
        let mut buf = Vec::with_capacity(HEADER_LEN + self.records.len() * (RECORD_META_LEN + 4 * len));
        buf.extend_from_slice(&ESB_MAGIC);
        buf.extend_from_slice(&ESB_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.channels.to_le_bytes());
        buf.extend_from_slice(&self.samples.to_le_bytes());
        buf.extend_from_slice(&self.sample_rate.to_le_bytes());
        for (index, r) in self.records.iter().enumerate() {
            if r.data.len() != len {
                return Err(EsbError::DimMismatch {
                    index,
                    expected: len,
                    got: r.data.len(),
                });
            }
            if r.data.iter().any(|v| !v.is_finite()) {
                return Err(EsbError::NonFinite { index });
            }
            buf.extend_from_slice(&r.subject.to_le_bytes());
            buf.extend_from_slice(&r.session.to_le_bytes());
            buf.extend_from_slice(&r.trial.to_le_bytes());
            buf.extend_from_slice(&r.local_rt.to_le_bytes());
            buf.extend_from_slice(&r.global_rt.to_le_bytes());
            buf.push(r.label.code() as u8);
            for v in &r.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, EsbError> {
        if buf.len() < 4 {
            return Err(EsbError::Truncated {
                needed: HEADER_LEN,
                actual: buf.len(),
            });
        }
        let magic: [u8; 4] = buf[..4].try_into().expect("four bytes");
        if magic != ESB_MAGIC {
            return Err(EsbError::BadMagic(magic));
        }
        if buf.len() < HEADER_LEN {
            return Err(EsbError::Truncated {
                needed: HEADER_LEN,
                actual: buf.len(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("four bytes"));
        let version = u16_at(4);
        if version != ESB_VERSION {
            return Err(EsbError::Version(version));
        }
        let count = u32_at(6) as usize;
        let channels = u16_at(10);
        let samples = u32_at(12);
        let sample_rate = u32_at(16);
        let len = channels as usize * samples as usize;
        let rec_len = RECORD_META_LEN + 4 * len;
        let needed = HEADER_LEN + count * rec_len;
        if buf.len() < needed {
            return Err(EsbError::Truncated {
                needed,
                actual: buf.len(),
            });
        }
        if buf.len() > needed {
            return Err(EsbError::Trailing(buf.len() - needed));
        }
        let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().expect("four bytes"));
        let mut records = Vec::with_capacity(count);
        for index in 0..count {
            let o = HEADER_LEN + index * rec_len;
            let code = buf[o + 16] as i8;
            let label = Label::from_code(code).ok_or(EsbError::InvalidLabel { index, code })?;
            let p = o + RECORD_META_LEN;
            let data: Vec<f32> = (0..len).map(|j| f32_at(p + 4 * j)).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(EsbError::NonFinite { index });
            }
            records.push(SegmentRecord {
                subject: u16_at(o),
                session: u16_at(o + 2),
                trial: u32_at(o + 4),
                local_rt: f32_at(o + 8),
                global_rt: f32_at(o + 12),
                label,
                data,
            });
        }
        Ok(Self {
            channels,
            samples,
            sample_rate,
            records,
        })
    }
}

pub fn write_esb(path: &Path, data: &EsbData) -> Result<(), EsbError> {
    let bytes = data.encode()?;
    std::fs::write(path, bytes).map_err(|source| EsbError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_esb(path: &Path) -> Result<EsbData, EsbError> {
    let bytes = std::fs::read(path).map_err(|source| EsbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EsbData::decode(&bytes)
}

// ---------------------------------------------------------------------------
// Synthetic stream

/// Parameters of the synthetic drowsiness stream.
///
/// Each class has a fixed latent template: a few band-limited oscillations
/// per latent source. A subject's segment is its mixing matrix times the
/// template of the current label, plus jitter and white noise. Labels
/// follow a sticky two-state Markov chain and the mixing matrix can be
/// scaled up slowly over the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: u16,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub stream_length: usize,
    pub latent_sources: usize,
    /// Seeds the class templates and the mixing matrix shared by all subjects.
    pub template_seed: u64,
    /// Subject `s` draws its mixing deviation from `mixing_seed + s`.
    pub mixing_seed: u64,
    pub alert_freq_hz: f64,
    pub drowsy_freq_hz: f64,
    pub alert_amplitude: f64,
    pub drowsy_amplitude: f64,
    /// Relative size of the subject-specific mixing deviation.
    pub subject_shift: f64,
    /// Std of the log of a per-subject overall gain.
    pub subject_gain_spread: f64,
    /// Std of the log of a per-subject factor applied to every template frequency.
    pub subject_freq_spread: f64,
    /// Probability that the label stays the same between segments.
    pub stickiness: f64,
    /// Fractional growth of the mixing matrix from the first to the last segment.
    pub drift: f64,
    /// White noise std relative to unit template amplitude.
    pub noise: f64,
    /// Per-segment phase jitter (radians std) of the template oscillations.
    pub phase_jitter: f64,
    /// Per-segment std of the log amplitude of each latent source.
    pub amplitude_jitter: f64,
    /// Session baseline reaction time in seconds.
    pub base_rt: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 11,
            channels: 30,
            samples: 384,
            sample_rate: 128,
            stream_length: 600,
            latent_sources: 4,
            template_seed: 7,
            mixing_seed: 1000,
            alert_freq_hz: 10.0,
            drowsy_freq_hz: 5.0,
            alert_amplitude: 1.6,
            drowsy_amplitude: 1.0,
            subject_shift: 0.5,
            subject_gain_spread: 0.3,
            subject_freq_spread: 0.35,
            stickiness: 0.95,
            drift: 0.3,
            noise: 0.5,
            phase_jitter: 3.2,
            amplitude_jitter: 0.2,
            base_rt: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::SynthConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.stickiness) {
            return bad("stickiness must lie in [0, 1)");
        }
        if self.subjects == 0 || self.channels == 0 || self.samples == 0 || self.latent_sources == 0 {
            return bad("subjects, channels, samples and latent_sources must be positive");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        for (name, v) in [
            ("noise", self.noise),
            ("drift", self.drift),
            ("phase_jitter", self.phase_jitter),
            ("amplitude_jitter", self.amplitude_jitter),
            ("subject_shift", self.subject_shift),
            ("subject_gain_spread", self.subject_gain_spread),
            ("subject_freq_spread", self.subject_freq_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::SynthConfig(format!("{name} must be non-negative")));
            }
        }
        if !(self.base_rt > 0.0) {
            return bad("base_rt must be positive");
        }
        Ok(())
    }
}

/// One oscillatory component of a latent source.
#[derive(Clone, Copy, Debug)]
struct Component {
    freq: f64,
    phase: f64,
    amp: f64,
}

/// Per class, per latent source, a short list of components.
struct Templates {
    classes: [Vec<Vec<Component>>; 2],
    common_mixing: Vec<f64>,
}

fn templates(cfg: &SynthConfig) -> Templates {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.template_seed);
    let mut class = |freq: f64, amp: f64| -> Vec<Vec<Component>> {
        (0..cfg.latent_sources)
            .map(|_| {
                (0..3)
                    .map(|_| Component {
                        freq: freq * rng.random_range(0.85..1.15),
                        phase: rng.random_range(0.0..2.0 * PI),
                        amp: amp * rng.random_range(0.5..1.0),
                    })
                    .collect()
            })
            .collect()
    };
    let alert = class(cfg.alert_freq_hz, cfg.alert_amplitude);
    let drowsy = class(cfg.drowsy_freq_hz, cfg.drowsy_amplitude);
    let common_mixing = (0..cfg.channels * cfg.latent_sources)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Templates {
        classes: [alert, drowsy],
        common_mixing,
    }
}

/// Subject-specific mixing matrix and frequency factor.
fn subject_params(cfg: &SynthConfig, t: &Templates, subject: u16) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mixing_seed.wrapping_add(subject as u64));
    let gain = (cfg.subject_gain_spread * rng.sample::<f64, _>(StandardNormal)).exp();
    let scale = 1.0 / (cfg.latent_sources as f64).sqrt();
    let mixing = t
        .common_mixing
        .iter()
        .map(|&c| {
            let dev: f64 = rng.sample(StandardNormal);
            gain * scale * (c + cfg.subject_shift * dev)
        })
        .collect();
    let freq = (cfg.subject_freq_spread * rng.sample::<f64, _>(StandardNormal)).exp();
    (mixing, freq)
}

/// Simulates the sticky label chain; the first label is a fair coin.
pub fn markov_labels(len: usize, stickiness: f64, rng: &mut impl Rng) -> Vec<Label> {
    let mut out = Vec::with_capacity(len);
    let mut drowsy = rng.random_bool(0.5);
    for i in 0..len {
        if i > 0 && !rng.random_bool(stickiness) {
            drowsy = !drowsy;
        }
        out.push(if drowsy { Label::Drowsy } else { Label::Alert });
    }
    out
}

fn stream_rng(seed: u64, subject: u16) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

/// Generates one subject's stream (session 0, trials `0..stream_length`).
pub fn synth_subject(cfg: &SynthConfig, seed: u64, subject: u16) -> Result<Vec<SegmentRecord>, DataError> {
    cfg.validate()?;
    let t = templates(cfg);
    let (mixing, freq_factor) = subject_params(cfg, &t, subject);
    let mut rng = stream_rng(seed, subject);
    let labels = markov_labels(cfg.stream_length, cfg.stickiness, &mut rng);
    let (c, n, l) = (cfg.channels, cfg.samples, cfg.latent_sources);
    let dt = 1.0 / cfg.sample_rate as f64;
    let white = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let denom = cfg.stream_length.saturating_sub(1).max(1) as f64;
    let mut out = Vec::with_capacity(cfg.stream_length);
    for (trial, &label) in labels.iter().enumerate() {
        let k = if label == Label::Drowsy { 1 } else { 0 };
        let mut latent = vec![0.0f64; l * n];
        for (s, comps) in t.classes[k].iter().enumerate() {
            let amp_scale = if cfg.amplitude_jitter > 0.0 {
                (cfg.amplitude_jitter * rng.sample::<f64, _>(StandardNormal)).exp()
            } else {
                1.0
            };
            for comp in comps {
                let jitter = if cfg.phase_jitter > 0.0 {
                    cfg.phase_jitter * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let w = 2.0 * PI * comp.freq * freq_factor;
                for (j, v) in latent[s * n..(s + 1) * n].iter_mut().enumerate() {
                    *v += amp_scale * comp.amp * (w * j as f64 * dt + comp.phase + jitter).sin();
                }
            }
        }
        let growth = 1.0 + cfg.drift * trial as f64 / denom;
        let mut data = vec![0.0f32; c * n];
        for ch in 0..c {
            let row = &mut data[ch * n..(ch + 1) * n];
            for s in 0..l {
                let m = growth * mixing[ch * l + s];
                for (o, &v) in row.iter_mut().zip(&latent[s * n..(s + 1) * n]) {
                    *o += (m * v) as f32;
                }
            }
            if cfg.noise > 0.0 {
                for o in row.iter_mut() {
                    *o += white.sample(&mut rng) as f32;
                }
            }
        }
        let (lo, hi) = match label {
            Label::Drowsy => (3.4, 6.0),
            _ => (1.0, 1.3),
        };
        let local = cfg.base_rt * rng.random_range(lo..hi);
        let global = cfg.base_rt * rng.random_range(lo..hi);
        out.push(SegmentRecord {
            subject,
            session: 0,
            trial: trial as u32,
            local_rt: local as f32,
            global_rt: global as f32,
            label,
            data,
        });
    }
    Ok(out)
}

/// All subjects `0..subjects`, each as its own ordered stream.
pub fn synth_stream(cfg: &SynthConfig, seed: u64) -> Result<Vec<Vec<SegmentRecord>>, DataError> {
    (0..cfg.subjects).map(|s| synth_subject(cfg, seed, s)).collect()
}
