use std::fs;

use damel::experiment::{run_ablation_suite, run_seed_sweep, run_single, ExperimentConfig};
use damel::model::DamelConfig;

fn small(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.classes = 4;
    cfg.dataset.n1 = 80;
    cfg.dataset.gamma = 10.0;
    cfg.dataset.dim = 6;
    cfg.dataset.test_per_class = 20;
    cfg.dataset.group_hi = 40;
    cfg.dataset.group_lo = 10;
    cfg.model = DamelConfig {
        experts: 2,
        input_dim: 6,
        hidden_dim: 12,
        rep_dim: 6,
        classes: 4,
        ..DamelConfig::default()
    };
    cfg.train.epochs = 4;
    cfg.train.batch_size = 32;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn untrained_model_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        output_dir: tmp.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 0;
    for seed in 0..3 {
        let rec = run_single(&cfg, seed).unwrap();
        let chance = 1.0 / cfg.dataset.classes as f64;
        assert!(
            (rec.eval.overall_acc - chance).abs() <= 0.15,
            "seed {seed}: {}",
            rec.eval.overall_acc
        );
    }
}

#[test]
fn reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let mut a = run_single(&cfg, 5).unwrap();
    let bytes_a = fs::read(&a.checkpoint_path).unwrap();
    let metrics_a = fs::read(&a.metrics_path).unwrap();
    let mut b = run_single(&cfg, 5).unwrap();
    assert_eq!(bytes_a, fs::read(&b.checkpoint_path).unwrap());
    assert_eq!(metrics_a, fs::read(&b.metrics_path).unwrap());
    a.wall_clock_seconds = 0.0;
    b.wall_clock_seconds = 0.0;
    assert_eq!(a, b);
}

#[test]
fn averaging_off_and_on_both_log_raw_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.train.averaging = damel::averaging::Averaging::None;
    let none = run_single(&cfg, 1).unwrap();
    assert_eq!(none.eval, none.raw_eval);
    let metrics = fs::read_to_string(&none.metrics_path).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(
        last.ends_with(','),
        "averaged column empty without averaging: {last}"
    );

    cfg.train.averaging = damel::averaging::Averaging::Ema;
    let ema = run_single(&cfg, 1).unwrap();
    let metrics = fs::read_to_string(&ema.metrics_path).unwrap();
    assert!(!metrics.lines().last().unwrap().ends_with(','));
    // Same seed, same raw training trajectory.
    assert_eq!(ema.raw_predictions, none.raw_predictions);
}

#[test]
fn sweeps_report_their_size_and_duplicate_seeds_add_no_variance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let out = run_seed_sweep(&cfg, &[3, 3], Some(2)).unwrap();
    assert_eq!(out.summary.report.variance, 0.0);
    assert_eq!(out.summary.report.s, 2);

    let out = run_seed_sweep(&cfg, &[0, 1, 2, 3, 4], Some(2)).unwrap();
    let r = &out.summary.report;
    assert_eq!(r.s, 5);
    assert!((r.bias_sq + r.variance - r.mse).abs() < 1e-9);
    assert!(out.summary_path.is_file());
    assert!(out
        .records
        .iter()
        .all(|rec| rec.config_hash == out.summary.config_hash));
    assert!(run_seed_sweep(&cfg, &[1], None).is_err());
}

#[test]
fn suites_write_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.train.epochs = 2;
    cfg.seeds = vec![0];
    let out = run_ablation_suite(&cfg, "table12", Some(2)).unwrap();
    assert_eq!(out.rows.len(), 10);
    let csv = fs::read_to_string(&out.csv_path).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(out.rows[0].cell, "proposed");
}
