use std::path::Path;

use eegtta_core::adapter::{AdaptConfig, Head, LogEntry, PredictionLog};
use eegtta_core::eval::*;
use eegtta_core::data::SynthConfig;
use eegtta_core::nn::{EegNetConfig, Network};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn confusion_oracle(labels: &[u8], predicted: &[usize]) -> (f64, f64, f64) {
    let mut c = [[0u32; 2]; 2];
    for (&l, &p) in labels.iter().zip(predicted) {
        c[l as usize][p] += 1;
    }
    let (tp, fp, fn_) = (c[1][1] as f64, c[0][1] as f64, c[1][0] as f64);
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (100.0 * p, 100.0 * r, 100.0 * f)
}

fn pairwise_auroc(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    100.0 * wins / pairs
}

#[test]
fn auroc_counts_ordered_pairs() {
    let m = compute_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0], &[0.9, 0.4, 0.6, 0.1]).unwrap();
    assert!((m.auroc - 75.0).abs() < 1e-12);
}

#[test]
fn perfect_and_all_negative_predictions() {
    let labels = [0u8, 1, 1, 0, 1];
    let perfect: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let m = compute_metrics(&labels, &perfect, &scores).unwrap();
    assert_eq!((m.f1, m.auroc, m.precision, m.recall), (100.0, 100.0, 100.0, 100.0));

    let m = compute_metrics(&labels, &[0; 5], &[0.2; 5]).unwrap();
    assert_eq!(m.f1, 0.0);
    assert_eq!(m.precision, 0.0);
    assert_eq!(m.auroc, 50.0);
}

#[test]
fn single_class_logs_score_chance_auroc() {
    let m = compute_metrics(&[0, 0, 0], &[0, 1, 0], &[0.1, 0.9, 0.3]).unwrap();
    assert_eq!(m.auroc, 50.0);
    assert_eq!(m.f1, 0.0);
}

#[test]
fn empty_log_is_an_error() {
    assert!(matches!(compute_metrics(&[], &[], &[]), Err(EvalError::EmptyLog)));
    assert!(matches!(log_metrics(&PredictionLog::default()), Err(EvalError::EmptyLog)));
}

proptest! {
    #[test]
    fn metrics_match_confusion_counts(rows in prop::collection::vec((0u8..2, 0usize..2, 0u8..5), 1..300)) {
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let pred: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.2 as f64 / 4.0).collect();
        let m = compute_metrics(&labels, &pred, &scores).unwrap();
        let (p, r, f) = confusion_oracle(&labels, &pred);
        prop_assert!((m.precision - p).abs() < 1e-9);
        prop_assert!((m.recall - r).abs() < 1e-9);
        prop_assert!((m.f1 - f).abs() < 1e-9);
    }

    #[test]
    fn auroc_matches_pairwise_oracle(rows in prop::collection::vec((0u8..2, 0u16..50), 2..400)) {
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.1 as f64 / 49.0).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        prop_assert!((auroc(&labels, &scores) - pairwise_auroc(&labels, &scores)).abs() < 1e-9);
    }
}

#[test]
fn auroc_matches_pairwise_oracle_on_a_long_log() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    let n = 10_000;
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| ((l as f64 * 0.3 + rng.random::<f64>()) * 200.0).round() / 200.0)
        .collect();
    assert!((auroc(&labels, &scores) - pairwise_auroc(&labels, &scores)).abs() < 1e-9);
}

fn entry(step: u64, label: u8, predicted: usize, p1: f64) -> LogEntry {
    LogEntry {
        step,
        label: Some(label),
        predicted,
        probabilities: vec![1.0 - p1, p1],
        head: Head::Classifier,
        loss_total: None,
        loss_entropy: None,
        loss_energy: None,
        evicted_score: None,
        latency_ms: 1.0,
        feature: vec![step as f64, 0.5],
    }
}

#[test]
fn log_metrics_reads_drowsy_probability() {
    let log = PredictionLog {
        entries: vec![entry(1, 1, 1, 0.9), entry(2, 1, 0, 0.4), entry(3, 0, 1, 0.6), entry(4, 0, 0, 0.1)],
    };
    let m = log_metrics(&log).unwrap();
    assert!((m.auroc - 75.0).abs() < 1e-12);
    assert!((m.f1 - 50.0).abs() < 1e-12);

    let mut unlabeled = log.clone();
    unlabeled.entries[2].label = None;
    assert!(matches!(log_metrics(&unlabeled), Err(EvalError::MissingLabel(2))));
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        net: EegNetConfig {
            channels: 4,
            samples: 32,
            temporal_kernel: 8,
            separable_kernel: 4,
            pool1: 2,
            pool2: 4,
            ..EegNetConfig::default()
        },
        synth: SynthConfig {
            subjects: 3,
            channels: 4,
            samples: 32,
            sample_rate: 32,
            stream_length: 24,
            ..SynthConfig::default()
        },
        pretrain: PretrainConfig {
            epochs: 2,
            batch_size: 8,
            max_per_subject: Some(16),
            ..PretrainConfig::default()
        },
        adapt: AdaptConfig::default(),
        mode: ProtocolMode::All,
        seeds: vec![0, 1],
        workers: 1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn protocol_report_aggregates_per_subject_values() {
    let cfg = tiny_config();
    let methods = cfg.mode.methods(&cfg.adapt);
    let report = run_synthetic(&cfg, &methods).unwrap();
    assert_eq!(report.methods.len(), methods.len());
    assert_eq!(report.config, cfg);
    for m in &report.methods {
        assert_eq!(m.per_subject.len(), 3);
        assert_eq!(m.runs.len(), 6);
        let f1: Vec<f64> = m.per_subject.iter().map(|s| s.metrics.f1).collect();
        let mean = f1.iter().sum::<f64>() / f1.len() as f64;
        assert!((m.mean.f1 - mean).abs() < 1e-9);
        for s in &m.per_subject {
            let runs: Vec<f64> = m.runs.iter().filter(|r| r.subject == s.subject).map(|r| r.metrics.auroc).collect();
            assert!((s.metrics.auroc - runs.iter().sum::<f64>() / runs.len() as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn protocol_is_independent_of_worker_count() {
    let mut cfg = tiny_config();
    cfg.mode = ProtocolMode::BnConfigSweep;
    let methods = cfg.mode.methods(&cfg.adapt);
    assert_eq!(methods.len(), 3);
    let a = run_synthetic(&cfg, &methods).unwrap();
    cfg.workers = 3;
    let b = run_synthetic(&cfg, &methods).unwrap();
    for (x, y) in a.methods.iter().zip(&b.methods) {
        assert_eq!(x.per_subject, y.per_subject);
    }
}

#[test]
fn source_only_is_classifier_argmax_and_leaves_weights_alone() {
    let cfg = tiny_config();
    let data = Dataset::synthetic(&cfg.synth, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::<f32>::eegnet(&cfg.net, &mut rng).unwrap();
    let before = net.clone();
    let log = source_only(&net, &data.subjects[0]).unwrap();
    assert_eq!(net, before);
    for (e, x) in log.entries.iter().zip(&data.subjects[0].segments) {
        let logits = net.forward_eval(x).unwrap().logits.row(0).to_vec();
        assert_eq!(e.predicted, eegtta_core::prototypes::argmax(&logits));
    }
}

#[test]
fn disabled_pretraining_needs_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.pretrain.enabled = false;
    cfg.pretrain.checkpoint_dir = Some(dir.path().to_path_buf());
    let err = run_synthetic(&cfg, &[Method::SourceOnly]).unwrap_err();
    assert!(matches!(err, EvalError::MissingCheckpoint(_)), "{err}");
}

#[test]
fn checkpoints_are_saved_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.seeds = vec![0];
    cfg.pretrain.checkpoint_dir = Some(dir.path().join("ckpt"));
    let first = run_synthetic(&cfg, &[Method::SourceOnly]).unwrap();
    assert_eq!(std::fs::read_dir(dir.path().join("ckpt")).unwrap().count(), 3);
    cfg.pretrain.enabled = false;
    let second = run_synthetic(&cfg, &[Method::SourceOnly]).unwrap();
    assert_eq!(first.methods[0].per_subject, second.methods[0].per_subject);
}

fn eleven_subject_report() -> RunReport {
    let runs: Vec<RunRecord> = (0..11u16)
        .map(|s| RunRecord {
            seed: 0,
            subject: s + 1,
            metrics: Metrics {
                f1: 60.0 + s as f64 * 1.234_567,
                auroc: 70.0 + s as f64 / 3.0,
                precision: 50.0 + s as f64,
                recall: 90.0 - s as f64 * 2.5,
            },
            mean_latency_ms: 2.0,
            steps: 10,
        })
        .collect();
    RunReport {
        config: ExperimentConfig::default(),
        seeds: vec![0],
        methods: vec![MethodReport::from_runs(Method::SourceOnly, runs)],
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn per_subject_csv_has_subject_rows_and_footer() {
    let report = eleven_subject_report();
    let csv = per_subject_csv(&report.methods[0]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subject,f1,auroc,precision,recall");
    assert_eq!(lines.len(), 1 + 11 + 2);
    assert_eq!(lines[1], "S1,60.00,70.00,50.00,90.00");
    assert!(lines[12].starts_with("mean,"));
    assert!(lines[13].starts_with("std,"));
    for l in &lines[1..] {
        for v in l.split(',').skip(1) {
            assert_eq!(v.split('.').nth(1).map(str::len), Some(2), "{l}");
        }
    }
}

#[test]
fn emit_is_byte_stable_and_features_are_optional() {
    let report = eleven_subject_report();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_report(&report, a.path(), None).unwrap();
    emit_report(&report, b.path(), Some(&PredictionLog::default())).unwrap();
    for f in ["report.json", "per_subject.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f));
    }
    assert!(!a.path().join("features.csv").exists());
    assert!(!b.path().join("features.csv").exists());

    let back: RunReport = serde_json::from_slice(&read(a.path(), "report.json")).unwrap();
    assert_eq!(back, report);

    let log = PredictionLog {
        entries: vec![entry(1, 1, 1, 0.9), entry(2, 0, 0, 0.2)],
    };
    emit_report(&report, a.path(), Some(&log)).unwrap();
    let text = String::from_utf8(read(a.path(), "features.csv")).unwrap();
    assert_eq!(text, "step,class,f0,f1\n1,1,1,0.5\n2,0,2,0.5\n");
}

#[test]
fn emit_reports_unwritable_paths() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = emit_report(&eleven_subject_report(), &blocker.join("out"), None).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}

#[test]
fn standard_benchmark_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/standard_benchmark.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.synth.subjects, 11);
    assert_eq!(cfg.synth.stream_length, 600);
    assert_eq!(cfg.synth.stickiness, 0.95);
    assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!((cfg.net.channels, cfg.net.samples), (cfg.synth.channels, cfg.synth.samples));
}

#[test]
fn config_rejects_unknown_fields_and_versions() {
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seeds":[0],"sedes":[1]}"#).is_err());
    let cfg: ExperimentConfig = serde_json::from_str(r#"{"version":2}"#).unwrap();
    assert!(matches!(cfg.validate(), Err(EvalError::Config(_))));
    let mut cfg = ExperimentConfig::default();
    cfg.synth.channels = 8;
    assert!(matches!(cfg.validate(), Err(EvalError::Config(_))));
}

#[test]
fn mean_std_is_population_std() {
    let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!((m, s), (5.0, 2.0));
}
