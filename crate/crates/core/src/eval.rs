//! Streaming evaluation over leave-one-subject-out folds: metrics, source
//! pretraining, the protocol runner and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdaptConfig, AdaptError, Adapter, PredictionLog, Variant};
use crate::data::{loso_folds, read_esb, synth_stream, DataError, EsbError, SegmentRecord, SynthConfig};
use crate::losses::{softmax, softmax_rows};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{BnMode, Dims, EegNetConfig, GradScope, Network, NnError, OptState, Pass, Tensor4};
use crate::prototypes::argmax;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot score an empty prediction log")]
    EmptyLog,
    #[error("log entry {0} has no true label")]
    MissingLabel(usize),
    #[error("{0} labels for {1} predictions")]
    Length(usize, usize),
    #[error("no checkpoint at {0} and pretraining is disabled")]
    MissingCheckpoint(PathBuf),
    #[error("dataset has no labeled segments for subject {0}")]
    EmptySubject(u16),
    #[error("segment length {got} does not match network input {expected}")]
    SegmentShape { expected: usize, got: usize },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Esb(#[from] EsbError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Binary classification scores in percent; Drowsy is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub auroc: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Metrics {
    fn fields(&self) -> [f64; 4] {
        [self.f1, self.auroc, self.precision, self.recall]
    }

    fn from_fields(v: [f64; 4]) -> Self {
        Self {
            f1: v[0],
            auroc: v[1],
            precision: v[2],
            recall: v[3],
        }
    }
}

/// Area under the ROC curve from ranks, tied scores sharing their mean
/// rank. A log with a single class scores 50.
pub fn auroc(labels: &[u8], scores: &[f64]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 50.0;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l == 1).map(|(_, &r)| r).sum();
    let np = n_pos as f64;
    100.0 * (rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64)
}

/// `labels` and `predicted` are class indices; `scores` is the Drowsy probability.
pub fn compute_metrics(labels: &[u8], predicted: &[usize], scores: &[f64]) -> Result<Metrics, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    if predicted.len() != labels.len() || scores.len() != labels.len() {
        return Err(EvalError::Length(labels.len(), predicted.len().min(scores.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(predicted) {
        match (l == 1, p == 1) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if tp + fp == 0 || tp + fn_ == 0 || precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        f1: 100.0 * f1,
        auroc: auroc(labels, scores),
        precision: 100.0 * precision,
        recall: 100.0 * recall,
    })
}

pub fn log_metrics(log: &PredictionLog) -> Result<Metrics, EvalError> {
    let mut labels = Vec::with_capacity(log.len());
    for (i, e) in log.entries.iter().enumerate() {
        labels.push(e.label.ok_or(EvalError::MissingLabel(i))?);
    }
    let predicted: Vec<usize> = log.entries.iter().map(|e| e.predicted).collect();
    let scores: Vec<f64> = log.entries.iter().map(|e| e.probabilities[1]).collect();
    compute_metrics(&labels, &predicted, &scores)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Source pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random subsample of each source subject's segments.
    pub max_per_subject: Option<usize>,
    /// Checkpoints are read from here when present and written after training.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            max_per_subject: None,
            checkpoint_dir: None,
        }
    }
}

/// Labeled segments of one subject, in stream order.
#[derive(Clone, Debug)]
pub struct SubjectStream {
    pub subject: u16,
    pub segments: Vec<Tensor4<f32>>,
    pub labels: Vec<u8>,
}

impl SubjectStream {
    /// Keeps labeled records only, ordered by (session, trial).
    pub fn from_records(
        subject: u16,
        records: &[SegmentRecord],
        channels: usize,
        samples: usize,
    ) -> Result<Self, EvalError> {
        let mut recs: Vec<&SegmentRecord> = records
            .iter()
            .filter(|r| r.subject == subject && r.label.class().is_some())
            .collect();
        recs.sort_by_key(|r| (r.session, r.trial));
        if recs.is_empty() {
            return Err(EvalError::EmptySubject(subject));
        }
        let mut segments = Vec::with_capacity(recs.len());
        let mut labels = Vec::with_capacity(recs.len());
        for r in recs {
            if r.data.len() != channels * samples {
                return Err(EvalError::SegmentShape {
                    expected: channels * samples,
                    got: r.data.len(),
                });
            }
            segments.push(r.to_tensor(channels, samples)?);
            labels.push(r.label.class().expect("filtered to labeled"));
        }
        Ok(Self {
            subject,
            segments,
            labels,
        })
    }
}

/// Trains a fresh network with Adam and cross-entropy on the given subjects.
pub fn pretrain(
    net_cfg: &EegNetConfig,
    sources: &[&SubjectStream],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Network<f32>, EvalError> {
    if cfg.batch_size == 0 {
        return Err(EvalError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::eegnet(net_cfg, &mut rng)?;
    let mut pool: Vec<(&Tensor4<f32>, u8)> = Vec::new();
    for s in sources {
        let mut idx: Vec<usize> = (0..s.segments.len()).collect();
        if let Some(k) = cfg.max_per_subject {
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx.sort_unstable();
        }
        pool.extend(idx.into_iter().map(|i| (&s.segments[i], s.labels[i])));
    }
    if pool.is_empty() {
        return Err(EvalError::Config("no source segments to pretrain on".into()));
    }
    let mut opt = OptState::adam(cfg.lr);
    let classes = net.classes();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // A single-item batch has degenerate BN statistics.
            if chunk.len() < 2 {
                continue;
            }
            let x = Tensor4::stack(chunk.iter().map(|&i| pool[i].0))?;
            let f = net.forward(&x, Pass::Train, Some(&mut rng as &mut dyn RngCore))?;
            let mut grad = softmax_rows(&f.logits);
            let scale = 1.0 / chunk.len() as f32;
            for (r, &i) in chunk.iter().enumerate() {
                grad[[r, pool[i].1 as usize]] -= 1.0;
            }
            grad.mapv_inplace(|g| g * scale);
            debug_assert_eq!(grad.ncols(), classes);
            let grads = net.backward(&f.cache, &grad, GradScope::AllParams)?;
            opt.step(&mut net, &grads)?;
        }
    }
    Ok(net)
}

/// Source model predictions with no adaptation at all.
pub fn source_only(net: &Network<f32>, stream: &SubjectStream) -> Result<PredictionLog, EvalError> {
    let mut entries = Vec::with_capacity(stream.segments.len());
    for (i, x) in stream.segments.iter().enumerate() {
        let start = std::time::Instant::now();
        let f = net.forward_eval(x)?;
        let row = f.logits.row(0).to_vec();
        let probs: Vec<f64> = softmax(&row).iter().map(|&p| p as f64).collect();
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        entries.push(crate::adapter::LogEntry {
            step: i as u64 + 1,
            label: Some(stream.labels[i]),
            predicted: argmax(&row),
            probabilities: probs,
            head: crate::adapter::Head::Classifier,
            loss_total: None,
            loss_entropy: None,
            loss_energy: None,
            evicted_score: None,
            latency_ms,
            feature: f.features.row(0).iter().map(|&v| v as f64).collect(),
        });
    }
    if entries.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    Ok(PredictionLog { entries })
}

// ---------------------------------------------------------------------------
// Protocol

/// One way of processing a target stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    Adapt { variant: Variant, bn_mode: BnMode },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::SourceOnly => "source_only".into(),
            Method::Adapt { variant, bn_mode } => {
                let v = serde_json::to_value(variant).expect("variant serializes");
                let b = serde_json::to_value(bn_mode).expect("mode serializes");
                format!("{}+{}", v.as_str().unwrap_or("?"), b.as_str().unwrap_or("?"))
            }
        }
    }
}

/// Which comparison a protocol run performs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    SourceOnly,
    /// The configured variant under the configured BN mode.
    #[default]
    Variant,
    /// The full method under batch-only, tracked and fixed statistics.
    BnConfigSweep,
    /// Source-only, every variant, and the BN sweep.
    All,
}

impl ProtocolMode {
    pub fn methods(self, adapt: &AdaptConfig) -> Vec<Method> {
        let sweep = [BnMode::BatchOnly, BnMode::TrackRunning, BnMode::FixedSource]
            .map(|bn_mode| Method::Adapt {
                variant: Variant::Full,
                bn_mode,
            });
        match self {
            ProtocolMode::SourceOnly => vec![Method::SourceOnly],
            ProtocolMode::Variant => vec![Method::Adapt {
                variant: adapt.variant,
                bn_mode: adapt.bn_mode,
            }],
            ProtocolMode::BnConfigSweep => sweep.to_vec(),
            ProtocolMode::All => {
                let mut v = vec![Method::SourceOnly];
                v.extend(Variant::ALL.map(|variant| Method::Adapt {
                    variant,
                    bn_mode: BnMode::FixedSource,
                }));
                v.extend(sweep.into_iter().filter(|m| {
                    !matches!(m, Method::Adapt { bn_mode: BnMode::FixedSource, .. })
                }));
                v
            }
        }
    }
}

pub const CONFIG_VERSION: u32 = 1;

/// Everything a run depends on; echoed into `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub net: EegNetConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub mode: ProtocolMode,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            net: EegNetConfig::default(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            mode: ProtocolMode::default(),
            seeds: vec![0],
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.version != CONFIG_VERSION {
            return Err(EvalError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::Config("at least one seed is required".into()));
        }
        if self.workers == 0 {
            return Err(EvalError::Config("workers must be at least 1".into()));
        }
        if self.pretrain.batch_size < 2 {
            return Err(EvalError::Config("pretraining batch_size must be at least 2".into()));
        }
        if (self.net.channels, self.net.samples) != (self.synth.channels, self.synth.samples) {
            return Err(EvalError::Config(format!(
                "network input {}x{} does not match synthetic segments {}x{}",
                self.net.channels, self.net.samples, self.synth.channels, self.synth.samples
            )));
        }
        self.synth.validate()?;
        self.adapt.validate()?;
        Ok(())
    }
}

/// Per-subject streams used by one seed of a protocol run.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub channels: usize,
    pub samples: usize,
    pub subjects: Vec<SubjectStream>,
}

impl Dataset {
    pub fn from_records(records: &[SegmentRecord], channels: usize, samples: usize) -> Result<Self, EvalError> {
        let ids: std::collections::BTreeSet<u16> = records.iter().map(|r| r.subject).collect();
        let subjects = ids
            .into_iter()
            .map(|s| SubjectStream::from_records(s, records, channels, samples))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            channels,
            samples,
            subjects,
        })
    }

    /// Reads one ESB file, or every `*.esb` file of a directory in name order.
    pub fn from_esb_path(path: &Path, channels: usize, samples: usize) -> Result<Self, EvalError> {
        let files = esb_files(path)?;
        let mut records = Vec::new();
        for f in &files {
            let esb = read_esb(f)?;
            if (esb.channels as usize, esb.samples as usize) != (channels, samples) {
                return Err(EvalError::Config(format!(
                    "{}: segments are {}x{}, network expects {channels}x{samples}",
                    f.display(),
                    esb.channels,
                    esb.samples
                )));
            }
            records.extend(esb.records);
        }
        Self::from_records(&records, channels, samples)
    }

    pub fn synthetic(cfg: &SynthConfig, seed: u64) -> Result<Self, EvalError> {
        let streams = synth_stream(cfg, seed)?;
        let records: Vec<SegmentRecord> = streams.into_iter().flatten().collect();
        Self::from_records(&records, cfg.channels, cfg.samples)
    }
}

/// `path` itself if it is a file, else its `*.esb` entries sorted by name.
pub fn esb_files(path: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "esb"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(EvalError::Config(format!("no .esb files in {}", path.display())));
    }
    Ok(files)
}

/// Metrics of one method on one target subject for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub subject: u16,
    pub metrics: Metrics,
    pub mean_latency_ms: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: u16,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub name: String,
    /// Averaged over seeds, one row per subject in id order.
    pub per_subject: Vec<SubjectSummary>,
    pub mean: Metrics,
    pub std: Metrics,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    pub runs: Vec<RunRecord>,
}

impl MethodReport {
    pub fn from_runs(method: Method, mut runs: Vec<RunRecord>) -> Self {
        runs.sort_by_key(|r| (r.seed, r.subject));
        let mut by_subject: BTreeMap<u16, Vec<Metrics>> = BTreeMap::new();
        for r in &runs {
            by_subject.entry(r.subject).or_default().push(r.metrics);
        }
        let per_subject: Vec<SubjectSummary> = by_subject
            .into_iter()
            .map(|(subject, ms)| {
                let avg = |k: usize| ms.iter().map(|m| m.fields()[k]).sum::<f64>() / ms.len() as f64;
                SubjectSummary {
                    subject,
                    metrics: Metrics::from_fields([avg(0), avg(1), avg(2), avg(3)]),
                }
            })
            .collect();
        let stats: Vec<(f64, f64)> = (0..4)
            .map(|k| mean_std(&per_subject.iter().map(|s| s.metrics.fields()[k]).collect::<Vec<_>>()))
            .collect();
        let lat: Vec<f64> = runs.iter().map(|r| r.mean_latency_ms).collect();
        let steps: usize = runs.iter().map(|r| r.steps).sum();
        let weighted: f64 = runs.iter().map(|r| r.mean_latency_ms * r.steps as f64).sum();
        Self {
            method,
            name: method.name(),
            per_subject,
            mean: Metrics::from_fields([stats[0].0, stats[1].0, stats[2].0, stats[3].0]),
            std: Metrics::from_fields([stats[0].1, stats[1].1, stats[2].1, stats[3].1]),
            mean_latency_ms: if steps == 0 { 0.0 } else { weighted / steps as f64 },
            max_latency_ms: lat.iter().copied().fold(0.0, f64::max),
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodReport>,
}

impl RunReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

fn fold_seed(seed: u64, target: u16) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (target as u64 + 1)
}

/// Loads the fold's checkpoint if one exists, else pretrains (and saves
/// when a checkpoint directory is configured).
pub fn fold_network(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    target: u16,
    train: &[u16],
) -> Result<Network<f32>, EvalError> {
    let path = cfg
        .pretrain
        .checkpoint_dir
        .as_ref()
        .map(|d| d.join(format!("fold_s{seed}_t{target}.sawt")));
    if let Some(p) = &path {
        if p.exists() {
            return Ok(checkpoint::load(p)?);
        }
    }
    if !cfg.pretrain.enabled {
        return Err(EvalError::MissingCheckpoint(path.unwrap_or_default()));
    }
    let sources: Vec<&SubjectStream> = data.subjects.iter().filter(|s| train.contains(&s.subject)).collect();
    let net = pretrain(&cfg.net, &sources, &cfg.pretrain, fold_seed(seed, target))?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        checkpoint::save(&net, p)?;
    }
    Ok(net)
}

/// Streams `target` through `method` starting from the source network.
pub fn run_method(
    net: &Network<f32>,
    method: Method,
    adapt: &AdaptConfig,
    seed: u64,
    target: &SubjectStream,
) -> Result<PredictionLog, EvalError> {
    match method {
        Method::SourceOnly => source_only(net, target),
        Method::Adapt { variant, bn_mode } => {
            let cfg = AdaptConfig {
                variant,
                bn_mode,
                seed: fold_seed(seed, target.subject) ^ 0xada9,
                ..adapt.clone()
            };
            let mut a = Adapter::new(net.clone(), cfg)?;
            Ok(a.run_stream(&target.segments, Some(&target.labels))?)
        }
    }
}

/// Per fold: pretrain or load, then run every method on the target stream.
/// `datasets` yields the data for a seed (synthetic data is regenerated per
/// seed; loaded data is shared).
pub fn run_protocol<F>(
    cfg: &ExperimentConfig,
    methods: &[Method],
    dataset_for_seed: F,
) -> Result<RunReport, EvalError>
where
    F: Fn(u64) -> Result<Dataset, EvalError> + Sync,
{
    cfg.validate()?;
    let data: Vec<(u64, Dataset)> = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, dataset_for_seed(s)?)))
        .collect::<Result<_, EvalError>>()?;
    let mut jobs = Vec::new();
    for (di, (seed, d)) in data.iter().enumerate() {
        let ids: Vec<u16> = d.subjects.iter().map(|s| s.subject).collect();
        for fold in loso_folds(&ids)? {
            jobs.push((di, *seed, fold));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let results: Vec<Result<Vec<(Method, RunRecord)>, EvalError>> = pool.install(|| {
        jobs.par_iter()
            .map(|(di, seed, fold)| {
                let d = &data[*di].1;
                let net = fold_network(cfg, d, *seed, fold.target, &fold.train)?;
                let target = d
                    .subjects
                    .iter()
                    .find(|s| s.subject == fold.target)
                    .expect("fold target comes from the dataset");
                methods
                    .iter()
                    .map(|&m| {
                        let log = run_method(&net, m, &cfg.adapt, *seed, target)?;
                        Ok((
                            m,
                            RunRecord {
                                seed: *seed,
                                subject: fold.target,
                                metrics: log_metrics(&log)?,
                                mean_latency_ms: log.mean_latency_ms(),
                                steps: log.len(),
                            },
                        ))
                    })
                    .collect()
            })
            .collect()
    });
    let mut by_method: Vec<Vec<RunRecord>> = vec![Vec::new(); methods.len()];
    for r in results {
        for (m, rec) in r? {
            let i = methods.iter().position(|&x| x == m).expect("known method");
            by_method[i].push(rec);
        }
    }
    Ok(RunReport {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        methods: methods
            .iter()
            .zip(by_method)
            .map(|(&m, runs)| MethodReport::from_runs(m, runs))
            .collect(),
    })
}

/// Convenience wrapper over the synthetic generator.
pub fn run_synthetic(cfg: &ExperimentConfig, methods: &[Method]) -> Result<RunReport, EvalError> {
    run_protocol(cfg, methods, |seed| Dataset::synthetic(&cfg.synth, seed))
}

// ---------------------------------------------------------------------------
// Report files

/// Table-shaped CSV: one row per subject, then mean and std rows.
pub fn per_subject_csv(report: &MethodReport) -> String {
    let mut out = String::from("subject,f1,auroc,precision,recall\n");
    let row = |out: &mut String, name: &str, m: &Metrics| {
        writeln!(out, "{name},{:.2},{:.2},{:.2},{:.2}", m.f1, m.auroc, m.precision, m.recall).expect("string write");
    };
    for s in &report.per_subject {
        row(&mut out, &format!("S{}", s.subject), &s.metrics);
    }
    row(&mut out, "mean", &report.mean);
    row(&mut out, "std", &report.std);
    out
}

/// Rows `step,class,f0,f1,...` from a prediction log.
pub fn features_csv(log: &PredictionLog) -> String {
    let dim = log.entries.first().map_or(0, |e| e.feature.len());
    let mut out = String::from("step,class");
    for j in 0..dim {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    for e in &log.entries {
        write!(out, "{},{}", e.step, e.predicted).expect("string write");
        for v in &e.feature {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Writes `report.json`, `per_subject.csv` for the first method (plus
/// `per_subject_<name>.csv` for each method when there are several), and
/// `features.csv` when a non-empty log is supplied.
pub fn emit_report(report: &RunReport, out_dir: &Path, features: Option<&PredictionLog>) -> Result<(), EvalError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, text: &str| -> Result<(), EvalError> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))
    };
    write("report.json", &serde_json::to_string_pretty(report)?)?;
    if let Some(first) = report.methods.first() {
        write("per_subject.csv", &per_subject_csv(first))?;
    }
    if report.methods.len() > 1 {
        for m in &report.methods {
            write(&format!("per_subject_{}.csv", m.name.replace('+', "_")), &per_subject_csv(m))?;
        }
    }
    if let Some(log) = features.filter(|l| !l.is_empty()) {
        write("features.csv", &features_csv(log))?;
    }
    Ok(())
}

/// Batch-of-one input for a raw segment.
pub fn segment_tensor(data: &[f32], channels: usize, samples: usize) -> Result<Tensor4<f32>, EvalError> {
    Ok(Tensor4::from_vec(Dims::new(1, 1, channels, samples), data.to_vec())?)
}
