//! Online adaptation loop: store/evict, one BN-affine optimizer step over
//! the memory bank, prototype refresh, then prediction of the current
//! segment with the adapted model.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{softmax, total_loss, LossError, LossWeights, TotalLoss};
use crate::memory::{
    augment, AugmentConfig, Eviction, EvictionDirection, MemoryBank, MemoryError,
};
use crate::nn::{
    BnMode, Encoded, GradScope, NnError, Network, OptKind, OptState, ParamGrads, Pass, Real, Tensor4,
};
use crate::prototypes::{argmax, FilterDirection, PrototypeError, PrototypeSet};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("segment stream is empty")]
    EmptyStream,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Memory bank, BN-affine updates and prototype prediction.
    #[default]
    Full,
    /// Memory bank and prototypes; the network is never updated.
    NoBnUpdates,
    /// Objective on the current segment alone; classifier-head prediction.
    NoMemoryNoPl,
    /// Memory-bank objective; classifier-head prediction.
    NoPl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoBnUpdates,
        Variant::NoMemoryNoPl,
        Variant::NoPl,
    ];

    pub fn updates_network(self) -> bool {
        self != Variant::NoBnUpdates
    }

    pub fn uses_memory(self) -> bool {
        self != Variant::NoMemoryNoPl
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, Variant::Full | Variant::NoBnUpdates)
    }

    /// Short command-line spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBnUpdates => "no-bn",
            Variant::NoMemoryNoPl => "no-mem",
            Variant::NoPl => "no-pl",
        }
    }

    pub fn from_cli(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.cli_name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptKind,
    pub steps_per_sample: usize,
    pub bank_capacity: usize,
    pub loss: LossWeights,
    /// Prototype EMA smoothing factor.
    pub alpha: f64,
    pub bn_mode: BnMode,
    pub variant: Variant,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub filter_direction: FilterDirection,
    pub eviction_direction: EvictionDirection,
    /// Redraw every bank item's augmented twin at each step instead of
    /// keeping the one drawn at insertion.
    pub refresh_augmentations: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.1,
            optimizer: OptKind::AdamW,
            steps_per_sample: 1,
            bank_capacity: 16,
            loss: LossWeights::default(),
            alpha: 0.9,
            bn_mode: BnMode::FixedSource,
            variant: Variant::Full,
            seed: 0,
            augment: AugmentConfig::default(),
            filter_direction: FilterDirection::Above,
            eviction_direction: EvictionDirection::Highest,
            refresh_augmentations: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |m: &str| Err(AdaptError::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.steps_per_sample == 0 {
            return bad("steps_per_sample must be at least 1");
        }
        if self.bank_capacity == 0 {
            return bad("bank_capacity must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.augment.noise_rel_std.is_finite() && self.augment.noise_rel_std >= 0.0) {
            return bad("noise_rel_std must be non-negative");
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Which output produced the class probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Prototype,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub head: Head,
    pub loss_total: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub loss_energy: Option<f64>,
    pub evicted_id: Option<u64>,
    pub evicted_score: Option<f64>,
    /// Samples admitted to each class's pseudo-prototype this step.
    pub prototype_members: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub step: u64,
    pub class: usize,
    pub probabilities: Vec<f64>,
    /// Classifier input of the current segment after adaptation.
    pub feature: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Loss and BN-affine gradients of the adaptation objective.
///
/// `mem` and `aug` come from [`Network::encode`]. Running statistics move
/// only for [`BnMode::TrackRunning`], and only on the `mem` pass.
pub fn objective<T: Real>(
    net: &mut Network<T>,
    mem: &Encoded<T>,
    aug: &Encoded<T>,
    weights: &LossWeights,
) -> Result<(TotalLoss<T>, ParamGrads<T>), NnError> {
    let fm = net.forward_encoded(mem, Pass::Adapt)?;
    let tracking = net.bn_layers().any(|b| b.mode == BnMode::TrackRunning);
    let aug_pass = if tracking { Pass::Eval } else { Pass::Adapt };
    let fa = net.forward_encoded(aug, aug_pass)?;
    let loss = total_loss(&fm.logits, &fa.logits, weights);
    let mut grads = net.backward(&fm.cache, &loss.grad_mem, GradScope::BnAffineOnly)?;
    if weights.lambda_eng != 0.0 {
        grads.add_assign(&net.backward(&fa.cache, &loss.grad_aug, GradScope::BnAffineOnly)?)?;
    }
    Ok((loss, grads))
}

/// Encodings of a stored segment and its augmented twin.
#[derive(Clone, Debug)]
struct Cached<T> {
    orig: Encoded<T>,
    aug: Encoded<T>,
}

pub struct Adapter<T> {
    cfg: AdaptConfig,
    net: Network<T>,
    opt: OptState<T>,
    bank: MemoryBank<T>,
    protos: Option<PrototypeSet<T>>,
    cache: HashMap<u64, Cached<T>>,
    aug_rng: ChaCha8Rng,
    t: u64,
    last_eviction: Option<Eviction<T>>,
}

impl<T: Real> Adapter<T> {
    /// Takes ownership of a loaded network and sets its BN regime.
    pub fn new(mut net: Network<T>, cfg: AdaptConfig) -> Result<Self, AdaptError> {
        cfg.validate()?;
        net.set_bn_mode(cfg.bn_mode);
        let bank = MemoryBank::new(cfg.bank_capacity, cfg.seed, cfg.augment, cfg.eviction_direction)?;
        let opt = OptState::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
        let aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a06d);
        Ok(Self {
            cfg,
            net,
            opt,
            bank,
            protos: None,
            cache: HashMap::new(),
            aug_rng,
            t: 0,
            last_eviction: None,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn bank(&self) -> &MemoryBank<T> {
        &self.bank
    }

    pub fn prototypes(&self) -> Option<&PrototypeSet<T>> {
        self.protos.as_ref()
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Item removed by the most recent step, with every candidate's score.
    pub fn last_eviction(&self) -> Option<&Eviction<T>> {
        self.last_eviction.as_ref()
    }

    fn encode(&self, x: &Tensor4<T>) -> Result<Encoded<T>, NnError> {
        self.net.encode(x)
    }

    /// Caches encodings for bank item `id`; `orig` is reused when the
    /// caller already encoded `x`.
    fn store(&mut self, x: &Tensor4<T>, id: u64, orig: Option<Encoded<T>>) -> Result<(), AdaptError> {
        let kind = MemoryBank::<T>::kind_for(id as usize);
        let twin = self.bank.augmented(x, kind)?;
        let orig = match orig {
            Some(e) => e,
            None => self.encode(x)?,
        };
        let aug = self.encode(&twin)?;
        self.cache.insert(id, Cached { orig, aug });
        Ok(())
    }

    fn check_segment(&self, x: &Tensor4<T>) -> Result<(), AdaptError> {
        let d = x.dims();
        let e = self.net.input_dims();
        if d.n != 1 || (d.c, d.h, d.w) != (e.c, e.h, e.w) {
            return Err(NnError::Shape(format!("segment {d} does not match network input 1x{}x{}x{}", e.c, e.h, e.w)).into());
        }
        x.check_finite("segment")?;
        Ok(())
    }

    /// Processes one segment (batch of one) and predicts its class.
    pub fn adapt_step(&mut self, x: &Tensor4<T>) -> Result<Prediction, AdaptError> {
        self.check_segment(x)?;
        let ex = self.encode(x)?;
        self.t += 1;
        let t = self.t;
        let mut diag = Diagnostics {
            head: if self.cfg.variant.uses_prototypes() {
                Head::Prototype
            } else {
                Head::Classifier
            },
            loss_total: None,
            loss_entropy: None,
            loss_energy: None,
            evicted_id: None,
            evicted_score: None,
            prototype_members: None,
        };

        if t == 1 && self.cfg.variant.uses_prototypes() {
            self.protos = Some(PrototypeSet::from_classifier(
                self.net.classifier().weight_matrix(),
                self.cfg.alpha,
                self.cfg.loss.m_out,
                self.cfg.filter_direction,
            )?);
        }

        if self.cfg.variant.uses_memory() {
            self.store_and_evict(x, &ex, t, &mut diag)?;
        }

        if self.cfg.variant.updates_network() {
            for _ in 0..self.cfg.steps_per_sample {
                let loss = self.optimize(x, &ex, t)?;
                diag.loss_total = Some(loss.total.as_f64());
                diag.loss_entropy = Some(loss.entropy.as_f64());
                diag.loss_energy = Some(loss.energy.as_f64());
            }
        }

        if let Some(protos) = self.protos.as_mut() {
            let ids: Vec<u64> = self.bank.items().iter().map(|it| it.id).collect();
            let batch = Encoded::stack(ids.iter().map(|id| &self.cache[id].orig))?;
            let f = self.net.forward_encoded_eval(&batch)?;
            let stats = protos.update(f.features.view(), f.logits.view())?;
            diag.prototype_members = Some(stats.members);
        }

        let f = self.net.forward_encoded_eval(&ex)?;
        let z = f.features.row(0);
        let (class, probs) = match &self.protos {
            Some(p) => p.predict(z)?,
            None => {
                let row = f.logits.row(0).to_vec();
                (argmax(&row), softmax(&row))
            }
        };
        Ok(Prediction {
            step: t,
            class,
            probabilities: probs.iter().map(|p| p.as_f64()).collect(),
            feature: z.iter().map(|v| v.as_f64()).collect(),
            diagnostics: diag,
        })
    }

    fn store_and_evict(
        &mut self,
        x: &Tensor4<T>,
        ex: &Encoded<T>,
        t: u64,
        diag: &mut Diagnostics,
    ) -> Result<(), AdaptError> {
        if t == 1 {
            // The bank is filled with x plus augmentations, then one more
            // augmented copy joins so that the step still ends on an eviction.
            self.bank.initialize(x, t)?;
            let ids: Vec<(u64, Tensor4<T>)> =
                self.bank.items().iter().map(|it| (it.id, it.segment.clone())).collect();
            for (i, (id, seg)) in ids.into_iter().enumerate() {
                self.store(&seg, id, (i == 0).then(|| ex.clone()))?;
            }
            let kind = MemoryBank::<T>::kind_for(self.bank.capacity() - 1);
            let extra = self.bank.augmented(x, kind)?;
            let id = self.bank.insert(extra.clone(), t);
            self.store(&extra, id, None)?;
        } else {
            let id = self.bank.insert(x.clone(), t);
            self.store(x, id, Some(ex.clone()))?;
        }

        let net = &self.net;
        let cache = &self.cache;
        let ev = self.bank.evict(t, |items| -> Result<Vec<Vec<T>>, AdaptError> {
            let batch = Encoded::stack(items.iter().map(|it| &cache[&it.id].orig))?;
            let f = net.forward_encoded_eval(&batch)?;
            Ok(f.logits.axis_iter(Axis(0)).map(|r| r.to_vec()).collect())
        })?;
        self.cache.remove(&ev.item.id);
        diag.evicted_id = Some(ev.item.id);
        diag.evicted_score = Some(ev.score.as_f64());
        self.last_eviction = Some(ev);
        Ok(())
    }

    fn optimize(&mut self, x: &Tensor4<T>, ex: &Encoded<T>, t: u64) -> Result<TotalLoss<T>, AdaptError> {
        let (mem, aug) = if self.cfg.variant.uses_memory() {
            if self.cfg.refresh_augmentations {
                let items: Vec<(u64, Tensor4<T>)> =
                    self.bank.items().iter().map(|it| (it.id, it.segment.clone())).collect();
                for (id, seg) in items {
                    let twin = self.bank.augmented(&seg, MemoryBank::<T>::kind_for(id as usize))?;
                    let a = self.encode(&twin)?;
                    self.cache.get_mut(&id).expect("cached bank item").aug = a;
                }
            }
            let ids: Vec<u64> = self.bank.items().iter().map(|it| it.id).collect();
            (
                Encoded::stack(ids.iter().map(|id| &self.cache[id].orig))?,
                Encoded::stack(ids.iter().map(|id| &self.cache[id].aug))?,
            )
        } else {
            let kind = MemoryBank::<T>::kind_for(t as usize - 1);
            let twin = augment(x, kind, &self.cfg.augment, &mut self.aug_rng)?;
            (ex.clone(), self.encode(&twin)?)
        };
        let (loss, grads) = objective(&mut self.net, &mem, &aug, &self.cfg.loss)?;
        self.opt.step(&mut self.net, &grads)?;
        Ok(loss)
    }

    /// Runs `adapt_step` over an ordered stream.
    pub fn run_stream<'a, I>(&mut self, segments: I, labels: Option<&[u8]>) -> Result<PredictionLog, AdaptError>
    where
        I: IntoIterator<Item = &'a Tensor4<T>>,
    {
        let mut entries = Vec::new();
        for (i, x) in segments.into_iter().enumerate() {
            let start = Instant::now();
            let p = self.adapt_step(x)?;
            let latency_ms = start.elapsed().as_secs_f64() * 1e3;
            entries.push(LogEntry::new(p, labels.and_then(|l| l.get(i).copied()), latency_ms));
        }
        if entries.is_empty() {
            return Err(AdaptError::EmptyStream);
        }
        Ok(PredictionLog { entries })
    }
}

/// One JSON line of a prediction log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub label: Option<u8>,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub head: Head,
    pub loss_total: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub loss_energy: Option<f64>,
    pub evicted_score: Option<f64>,
    pub latency_ms: f64,
    #[serde(skip)]
    pub feature: Vec<f64>,
}

impl LogEntry {
    pub fn new(p: Prediction, label: Option<u8>, latency_ms: f64) -> Self {
        Self {
            step: p.step,
            label,
            predicted: p.class,
            probabilities: p.probabilities,
            head: p.diagnostics.head,
            loss_total: p.diagnostics.loss_total,
            loss_entropy: p.diagnostics.loss_entropy,
            loss_energy: p.diagnostics.loss_energy,
            evicted_score: p.diagnostics.evicted_score,
            latency_ms,
            feature: p.feature,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionLog {
    pub entries: Vec<LogEntry>,
}

impl PredictionLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.latency_ms).sum::<f64>() / self.entries.len() as f64
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), AdaptError> {
        let io = |source| AdaptError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }
}
