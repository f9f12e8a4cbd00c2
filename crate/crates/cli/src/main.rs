//! `eegtta`: pretraining, streaming adaptation, evaluation and data tools.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or config errors.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use eegtta_core::adapter::{Adapter, Variant};
use eegtta_core::data::{read_esb, write_esb, EsbData, Label, SegmentRecord};
use eegtta_core::eval::{
    emit_report, esb_files, features_csv, fold_network, log_metrics, run_protocol, Dataset, ExperimentConfig,
    ProtocolMode, RunReport,
};
use eegtta_core::nn::{checkpoint, BnMode};

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "eegtta", version, about = "Streaming test-time adaptation for EEG drowsiness detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one source checkpoint per leave-one-subject-out fold into --out.
    Pretrain(Common),
    /// Stream one subject's ESB data through a checkpoint and write a prediction log.
    Adapt(AdaptArgs),
    /// Run the evaluation protocol selected by the config and write a report.
    Evaluate(Common),
    /// Compare batch-only, tracked and fixed BN statistics.
    BnSweep(Common),
    /// Write the synthetic benchmark as one ESB file per subject.
    Synth(Common),
    /// Validate an ESB file and print a summary.
    ConvertCheck {
        path: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON experiment config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ESB file or directory of ESB files (synthetic data when omitted).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    bn_mode: Option<BnModeArg>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    common: Common,
    /// Pretrained network checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write features.csv (step, predicted class, feature vector).
    #[arg(long)]
    features: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Full,
    NoBn,
    NoMem,
    NoPl,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoBn => Variant::NoBnUpdates,
            VariantArg::NoMem => Variant::NoMemoryNoPl,
            VariantArg::NoPl => Variant::NoPl,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BnModeArg {
    Fixed,
    Track,
    Batch,
}

impl From<BnModeArg> for BnMode {
    fn from(m: BnModeArg) -> Self {
        match m {
            BnModeArg::Fixed => BnMode::FixedSource,
            BnModeArg::Track => BnMode::TrackRunning,
            BnModeArg::Batch => BnMode::BatchOnly,
        }
    }
}

impl Common {
    /// File config (or defaults) with flag overrides applied, validated.
    fn effective_config(&self) -> Result<ExperimentConfig, Box<dyn Error>> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
            cfg.adapt.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.adapt.variant = v.into();
        }
        if let Some(m) = self.bn_mode {
            cfg.adapt.bn_mode = m.into();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn dataset(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Dataset, eegtta_core::eval::EvalError> {
        match &self.data {
            Some(p) => Dataset::from_esb_path(p, cfg.net.channels, cfg.net.samples),
            None => Dataset::synthetic(&cfg.synth, seed),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Pretrain(c) => pretrain(&c),
        Command::Adapt(a) => adapt(&a),
        Command::Evaluate(c) => {
            let cfg = c.effective_config()?;
            evaluate(&c, cfg, "report")
        }
        Command::BnSweep(c) => {
            let mut cfg = c.effective_config()?;
            cfg.mode = ProtocolMode::BnConfigSweep;
            evaluate(&c, cfg, "bn_sweep")
        }
        Command::Synth(c) => synth(&c),
        Command::ConvertCheck { path } => convert_check(&path),
    }
}

fn pretrain(c: &Common) -> CliResult {
    let mut cfg = c.effective_config()?;
    let out = c.out_dir("checkpoints");
    cfg.pretrain.enabled = true;
    cfg.pretrain.checkpoint_dir = Some(out.clone());
    for &seed in &cfg.seeds {
        let data = c.dataset(&cfg, seed)?;
        let ids: Vec<u16> = data.subjects.iter().map(|s| s.subject).collect();
        for fold in eegtta_core::data::loso_folds(&ids)? {
            fold_network(&cfg, &data, seed, fold.target, &fold.train)?;
            println!("seed {seed} target {}: done", fold.target);
        }
    }
    write_json(&out.join("config.json"), &cfg)?;
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn evaluate(c: &Common, cfg: ExperimentConfig, default_out: &str) -> CliResult {
    let methods = cfg.mode.methods(&cfg.adapt);
    let report = run_protocol(&cfg, &methods, |seed| c.dataset(&cfg, seed))?;
    let out = c.out_dir(default_out);
    emit_report(&report, &out, None)?;
    print_summary(&report);
    println!("report written to {}", out.display());
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!("{:<32} {:>8} {:>8} {:>8} {:>8} {:>10}", "method", "F1", "AUROC", "prec", "recall", "ms/step");
    for m in &report.methods {
        println!(
            "{:<32} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>10.3}",
            m.name, m.mean.f1, m.mean.auroc, m.mean.precision, m.mean.recall, m.mean_latency_ms
        );
    }
}

fn adapt(a: &AdaptArgs) -> CliResult {
    let cfg = a.common.effective_config()?;
    let data = a.common.data.as_ref().ok_or("adapt needs --data")?;
    let net = checkpoint::load::<f32>(&a.checkpoint)?;
    let dims = net.input_dims();
    let mut records: Vec<SegmentRecord> = Vec::new();
    let mut segment_dims = None;
    for f in esb_files(data)? {
        let esb = read_esb(&f)?;
        segment_dims = Some((esb.channels as usize, esb.samples as usize));
        records.extend(esb.records);
    }
    let (channels, samples) = segment_dims.ok_or("no segments found")?;
    if (channels, samples) != (dims.h, dims.w) {
        return Err(format!(
            "segments are {channels}x{samples}, checkpoint expects {}x{}",
            dims.h, dims.w
        )
        .into());
    }
    let subjects: std::collections::BTreeSet<u16> = records.iter().map(|r| r.subject).collect();
    if subjects.len() != 1 {
        return Err(format!("adapt streams one subject, found {}", subjects.len()).into());
    }
    records.sort_by_key(|r| (r.session, r.trial));
    let segments = records
        .iter()
        .map(|r| r.to_tensor(channels, samples))
        .collect::<Result<Vec<_>, _>>()?;
    let mut adapter = Adapter::new(net, cfg.adapt.clone())?;
    let mut log = adapter.run_stream(&segments, None)?;
    for (e, r) in log.entries.iter_mut().zip(&records) {
        e.label = r.label.class();
    }
    let out = a.common.out_dir("adapt");
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    log.write_jsonl(&out.join("predictions.jsonl"))?;
    write_json(&out.join("config.json"), &cfg)?;
    if a.features {
        let p = out.join("features.csv");
        std::fs::write(&p, features_csv(&log)).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    if log.entries.iter().all(|e| e.label.is_some()) {
        let m = log_metrics(&log)?;
        println!(
            "F1 {:.2}  AUROC {:.2}  precision {:.2}  recall {:.2}",
            m.f1, m.auroc, m.precision, m.recall
        );
    }
    println!(
        "{} steps, {:.3} ms/step, log written to {}",
        log.len(),
        log.mean_latency_ms(),
        out.display()
    );
    Ok(())
}

fn synth(c: &Common) -> CliResult {
    let cfg = c.effective_config()?;
    let seed = cfg.seeds[0];
    let out = c.out_dir("synth");
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let streams = eegtta_core::data::synth_stream(&cfg.synth, seed)?;
    for (s, records) in streams.into_iter().enumerate() {
        let esb = EsbData {
            channels: cfg.synth.channels as u16,
            samples: cfg.synth.samples as u32,
            sample_rate: cfg.synth.sample_rate,
            records,
        };
        write_esb(&out.join(format!("subject_{s:02}.esb")), &esb)?;
    }
    write_json(&out.join("config.json"), &cfg)?;
    println!("{} subjects written to {}", cfg.synth.subjects, out.display());
    Ok(())
}

fn convert_check(path: &Path) -> CliResult {
    let esb = read_esb(path).map_err(|e| format!("{}: {e} [{}]", path.display(), e.code()))?;
    let subjects: std::collections::BTreeSet<u16> = esb.records.iter().map(|r| r.subject).collect();
    let count = |l: Label| esb.records.iter().filter(|r| r.label == l).count();
    println!("{}: ok", path.display());
    println!(
        "records {}  subjects {}  channels {}  samples {}  sample_rate {}",
        esb.records.len(),
        subjects.len(),
        esb.channels,
        esb.samples,
        esb.sample_rate
    );
    println!(
        "alert {}  drowsy {}  unlabeled {}",
        count(Label::Alert),
        count(Label::Drowsy),
        count(Label::Unlabeled)
    );
    Ok(())
}

fn write_json(path: &Path, value: &ExperimentConfig) -> CliResult {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}
