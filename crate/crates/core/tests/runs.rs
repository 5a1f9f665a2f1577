use std::fs;
use std::path::Path;

use fedqssl::analysis;
use fedqssl::datagen::{self, DataGenParams};
use fedqssl::orchestrator::{
    self, ExperimentConfig, MetricsTable, RoundHook, RunError, RunOptions, METRICS_FILE, TIMING_FILE,
};
use fedqssl::streams::{stream, Domain};

fn reference() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let text = fs::read_to_string(&path).unwrap();
    ExperimentConfig::from_json(&text, &path).unwrap()
}

fn small(bits: Vec<u32>, rounds: i64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(bits.len(), 8, bits, rounds);
    cfg.model.m = Some(2);
    cfg.data.frequent_count = 300;
    cfg
}

struct AbortAt(u64);

impl RoundHook for AbortAt {
    fn before_round(&mut self, round: u64) -> Result<(), String> {
        if round == self.0 {
            Err("injected fault".into())
        } else {
            Ok(())
        }
    }
}

#[test]
fn abort_leaves_completed_rows_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(vec![6, 6], 6);
    let full = dir.path().join("full");
    orchestrator::run_experiment(&cfg, &RunOptions { out_dir: Some(full.clone()), threads: Some(2) }).unwrap();
    let full_text = fs::read_to_string(full.join(METRICS_FILE)).unwrap();

    for t in [1u64, 4] {
        let out = dir.path().join(format!("abort{t}"));
        let err = orchestrator::run_experiment_with_hook(
            &cfg,
            &RunOptions { out_dir: Some(out.clone()), threads: Some(2) },
            &mut AbortAt(t),
        )
        .unwrap_err();
        assert!(matches!(err, RunError::Aborted { round, .. } if round == t));
        let text = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
        let table = MetricsTable::parse(&text).unwrap();
        assert_eq!(table.rows.len() as u64, t - 1);
        assert!(full_text.starts_with(&text));
        assert!(text.ends_with('\n'));
    }
}

#[test]
fn wall_time_stays_out_of_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(vec![6], 3);
    orchestrator::run_experiment(&cfg, &RunOptions { out_dir: Some(dir.path().into()), threads: None }).unwrap();
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(!metrics.lines().next().unwrap().contains("wall"));
    let timing = fs::read_to_string(dir.path().join(TIMING_FILE)).unwrap();
    assert_eq!(timing.lines().count(), 4);
}

#[test]
fn reference_instance_golden() {
    let summary = orchestrator::run_experiment(&reference(), &RunOptions::default()).unwrap();
    let initial = summary.initial.global_loss;
    let last = summary.records.last().unwrap().global_loss;
    assert!(last < 0.25 * initial, "{last} vs {initial}");
    // pinned from the first recorded run
    assert!((initial - 5.621312).abs() < 1e-6, "initial loss {initial}");
    assert!((last - 1.139421).abs() < 1e-6, "final loss {last}");
}

#[test]
fn single_client_round_is_identity_up_to_requantization() {
    let mut cfg = small(vec![16], 1);
    cfg.local_epochs = 1;
    let summary = orchestrator::run_experiment(&cfg, &RunOptions::default()).unwrap();
    let (_, err) = summary.requant[0];
    let norm: f64 = summary.global_model[0].iter().map(|v| v * v).sum();
    assert!(err < 1e-4 * norm, "ε_r {err} vs ‖w‖² {norm}");
}

#[test]
fn high_bitwidth_shadows_full_precision() {
    for bits in [12u32, 16] {
        let mut quantized = small(vec![bits, bits], 30);
        quantized.local_epochs = 2;
        let mut plain = quantized.clone();
        plain.quantize = false;
        let q = orchestrator::run_experiment(&quantized, &RunOptions::default()).unwrap();
        let p = orchestrator::run_experiment(&plain, &RunOptions::default()).unwrap();
        let lq = q.records.last().unwrap().global_loss;
        let lp = p.records.last().unwrap().global_loss;
        assert!(((lq - lp) / lp).abs() < 0.05, "{bits} bits: {lq} vs {lp}");
    }
}

#[test]
fn gq_shrinks_with_rate() {
    let mut previous = f64::INFINITY;
    for bits in [4u32, 5, 6, 7] {
        let mut cfg = small(vec![bits, bits], 10);
        cfg.metrics.moreau = false;
        let s = orchestrator::run_experiment(&cfg, &RunOptions::default()).unwrap();
        let gq = analysis::gq_estimate(&s.all_steps(), &s.requant).unwrap();
        assert!(gq > 0.0 && gq.is_finite());
        assert!(gq <= previous, "G_q at {bits} bits: {gq} > {previous}");
        previous = gq;
    }
}

#[test]
fn convergence_bound_dominates_reference_trajectory() {
    let summary = orchestrator::run_experiment(&reference(), &RunOptions::default()).unwrap();
    let report = analysis::convergence_report(&summary).unwrap();
    assert!(report.final_average() <= 3.0 * report.rhs);
    assert!(report.phi_min <= report.phi0);
    assert_eq!(report.surrogate_sq.len(), summary.records.len() + 1);
}

#[test]
fn deep_encoder_runs_and_learns() {
    let mut cfg = small(vec![8, 8], 15);
    cfg.model.layers = Some(vec![8, 6, 2]);
    cfg.model.activation = fedqssl::client::Activation::Relu;
    let s = orchestrator::run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert!(s.records.iter().all(|r| r.moreau_surrogate.is_none() && r.global_loss.is_finite()));
    assert!(s.records.last().unwrap().global_loss < s.initial.global_loss);
}

const REPRESENTABILITY_GOLDEN: &str = include_str!("golden/representability_d32_n2.csv");

#[test]
fn representability_report_golden() {
    let params = DataGenParams::new(2, 32, 0);
    let mut shards = datagen::generate_all(&params).unwrap();
    let mut rng = stream(0, Domain::Probe, 0);
    let rows = analysis::local_vs_global_representability_report(&mut shards, 2, 0.0, &mut rng).unwrap();
    for row in &rows {
        for &r in &row.representability {
            assert!(r > 0.5, "{row:?}");
        }
    }
    let text = analysis::format_representability_report(&rows);
    assert_eq!(text, REPRESENTABILITY_GOLDEN);
}
