//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{check_net, RandomNet};
use damel::averaging::{
    recompute_running_stats_in_chunks, Averaging, AveragingState, EmaState, SwaState,
};
use damel::data::{long_tail_counts, Group};
use damel::evaluation::{bias_variance_decompose, PredictionMatrix};
use damel::experiment::{run_cell, run_seed_sweep, run_single, ExperimentConfig, RunRecord};
use damel::model::{DamelModel, ParamGroup, Variant};
use damel::training::{train_with_observer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut ops = BTreeSet::new();
    let (mut entries, mut worst) = (0, 0.0f64);
    for seed in 0..50 {
        let net = RandomNet::generate(seed);
        ops.extend(net.op_names());
        let report = check_net(&net, 1e-5, 1e-4, 1e-7).map_err(|e| format!("net {seed}: {e}"))?;
        ensure(report.failures.is_empty(), || {
            format!("net {seed}: {}", report.failures.join("; "))
        })?;
        entries += report.entries;
        worst = worst.max(report.worst_rel);
    }
    let secs = started.elapsed().as_secs_f64();
    for op in [
        "l2_normalize",
        "batch_norm",
        "cross_entropy",
        "weighted_cross_entropy",
    ] {
        ensure(ops.contains(op), || format!("no network exercised {op}"))?;
    }
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{entries} entries over 50 nets, worst relative error {worst:.2e}, {secs:.2}s"
    ))
}

fn detach_wall() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (train_ds, _) = cfg.dataset.build(0).map_err(|e| e.to_string())?;
    let mut model = DamelModel::init(&cfg.model, 0).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        epochs: 10,
        ..cfg.train.clone()
    };
    let mut avg = AveragingState::for_method(Averaging::Ema, train_cfg.beta_ema)
        .map_err(|e| e.to_string())?;
    let lambda = train_cfg.lambda_cb;
    let (mut steps, mut violations) = (0usize, Vec::new());
    train_with_observer(
        &mut model,
        &train_ds,
        &train_cfg,
        &mut avg,
        None,
        0,
        &mut |ctx| {
            let weighted = ctx.tape.scale(&ctx.losses.cb, lambda)?;
            let g = ctx.gradient_of(&weighted)?;
            for (group, range) in ctx.segments {
                let nonzero = g[range.clone()].iter().filter(|&&v| v != 0.0).count();
                match group {
                    ParamGroup::Aux if nonzero == 0 => {
                        violations.push(format!("step {}: aux gradient is zero", ctx.iteration))
                    }
                    ParamGroup::Backbone | ParamGroup::Expert(_) if nonzero > 0 => {
                        violations.push(format!(
                            "step {}: {group:?} has {nonzero} nonzero entries",
                            ctx.iteration
                        ))
                    }
                    _ => {}
                }
            }
            steps += 1;
            Ok(())
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(violations.is_empty(), || {
        violations[..violations.len().min(3)].join("; ")
    })?;
    ensure(steps > 0, || "no steps ran".into())?;
    Ok(format!(
        "{steps} steps over 10 epochs, backbone and expert gradients of λ·L_CB exactly zero"
    ))
}

fn ema_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let betas = [0.01, 0.1, 0.3, 1.0];
    let (mut worst_ema, mut worst_swa) = (0.0f64, 0.0f64);
    for stream in 0..20 {
        let beta = betas[stream % betas.len()];
        let len = rng.random_range(3..=50);
        let dim = rng.random_range(1..8);
        let snaps: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let mut ema = EmaState::new(beta).map_err(|e| e.to_string())?;
        let mut swa = SwaState::new();
        for s in &snaps {
            ema.update(s).map_err(|e| e.to_string())?;
            swa.update(s).map_err(|e| e.to_string())?;
        }
        // θ_EMA = (1−β)^(n−1)·θ_1 + Σ_{i≥2} β(1−β)^(n−i)·θ_i
        let n = snaps.len();
        for j in 0..dim {
            let mut closed = (1.0 - beta).powi(n as i32 - 1) * snaps[0][j];
            for (i, s) in snaps.iter().enumerate().skip(1) {
                closed += beta * (1.0 - beta).powi((n - 1 - i) as i32) * s[j];
            }
            worst_ema = worst_ema.max((ema.weights().unwrap()[j] - closed).abs());
            let mean = snaps.iter().map(|s| s[j]).sum::<f64>() / n as f64;
            worst_swa = worst_swa.max((swa.weights().unwrap()[j] - mean).abs());
        }
    }
    ensure(worst_ema <= 1e-9, || {
        format!("EMA deviates by {worst_ema:e}")
    })?;
    ensure(worst_swa <= 1e-12, || {
        format!("SWA deviates by {worst_swa:e}")
    })?;
    Ok(format!(
        "20 streams, max EMA error {worst_ema:.1e}, max SWA error {worst_swa:.1e}"
    ))
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (s, m, classes) = (
            rng.random_range(2..12),
            rng.random_range(1..60),
            rng.random_range(2..11),
        );
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let preds: Vec<PredictionMatrix> = (0..s)
            .map(|_| {
                let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
                PredictionMatrix::one_hot(&idx, classes).unwrap()
            })
            .collect();
        let y = PredictionMatrix::one_hot(&labels, classes).unwrap();
        let r =
            bias_variance_decompose(&preds, &y, false).map_err(|e| format!("case {case}: {e}"))?;
        worst = worst.max((r.bias_sq + r.variance - r.mse).abs());
    }
    ensure(worst <= 1e-9, || format!("identity residual {worst:e}"))?;
    let y = PredictionMatrix::one_hot(&[0], 2).unwrap();
    let preds = [
        PredictionMatrix::one_hot(&[0], 2).unwrap(),
        PredictionMatrix::one_hot(&[1], 2).unwrap(),
    ];
    let hand = bias_variance_decompose(&preds, &y, false).map_err(|e| e.to_string())?;
    let got = (hand.bias_sq, hand.variance, hand.mse);
    ensure(got == (0.5, 0.5, 1.0), || format!("hand case gave {got:?}"))?;
    Ok(format!(
        "100 ensembles, max residual {worst:.1e}; hand case (0.5, 0.5, 1.0)"
    ))
}

fn long_tail_profile() -> Outcome {
    let mut checked = 0;
    for classes in 2..=100 {
        for gamma in [1.0, 10.0, 50.0, 100.0] {
            for n1 in [100, 137, 500, 1000, 4999] {
                let spec = long_tail_counts(classes, n1, gamma).map_err(|e| e.to_string())?;
                let c = spec.counts();
                let tail = (n1 as f64 / gamma + 0.5).floor() as usize;
                ensure(c[0] == n1 && c[classes - 1] == tail, || {
                    format!(
                        "L={classes} N1={n1} γ={gamma}: endpoints {} and {}",
                        c[0],
                        c[classes - 1]
                    )
                })?;
                ensure(c.windows(2).all(|w| w[0] >= w[1]), || {
                    format!("L={classes} N1={n1} γ={gamma}: not monotone")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} profiles with exact endpoints and non-increasing counts"
    ))
}

fn run_many(
    jobs: Vec<(String, ExperimentConfig, u64)>,
    out: &Path,
) -> Result<Vec<RunRecord>, String> {
    jobs.par_iter()
        .map(|(cell, cfg, seed)| {
            run_cell(&cfg.setup(), *seed, out, "acceptance", cell)
                .map_err(|e| format!("{cell} seed {seed}: {e}"))
        })
        .collect()
}

struct TrendRuns {
    cb: Vec<RunRecord>,
    no_cb: Vec<RunRecord>,
    aggregate: Vec<RunRecord>,
    secs: f64,
}

fn trend_runs(out: &Path) -> Result<TrendRuns, String> {
    let started = Instant::now();
    let base = ExperimentConfig::default();
    let mut no_cb = base.clone();
    no_cb.train.cb_loss_enabled = false;
    let mut aggregate = base.clone();
    aggregate.model.variant = Variant::AggregatePredictions;
    let mut jobs = Vec::new();
    for seed in 0..5 {
        jobs.push(("standard".to_string(), base.clone(), seed));
        jobs.push(("no-cb".to_string(), no_cb.clone(), seed));
        jobs.push(("aggregate".to_string(), aggregate.clone(), seed));
    }
    let records = run_many(jobs, out)?;
    let pick = |cell: &str| {
        records
            .iter()
            .filter(|r| r.cell == cell)
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok(TrendRuns {
        cb: pick("standard"),
        no_cb: pick("no-cb"),
        aggregate: pick("aggregate"),
        secs: started.elapsed().as_secs_f64(),
    })
}

fn rebalancing_trend(runs: &TrendRuns) -> Outcome {
    let few = |r: &RunRecord| r.eval.group_acc.get(Group::Few).unwrap_or(f64::NAN);
    let wins = runs
        .cb
        .iter()
        .zip(&runs.no_cb)
        .filter(|(a, b)| few(a) > few(b))
        .count();
    let mean = |rs: &[RunRecord]| rs.iter().map(few).sum::<f64>() / rs.len() as f64;
    let detail = format!(
        "Few accuracy {:.1}% with CB loss vs {:.1}% without, CB wins {wins}/5 seeds",
        100.0 * mean(&runs.cb),
        100.0 * mean(&runs.no_cb)
    );
    ensure(wins >= 4, || detail.clone())?;
    ensure(runs.secs < 15.0 * 60.0, || {
        format!("runs took {:.0}s", runs.secs)
    })?;
    Ok(detail)
}

fn aggregation_trend(runs: &TrendRuns) -> Outcome {
    let mean =
        |rs: &[RunRecord]| rs.iter().map(|r| r.eval.overall_acc).sum::<f64>() / rs.len() as f64;
    let gap = 100.0 * (mean(&runs.cb) - mean(&runs.aggregate));
    let detail = format!(
        "standard {:.2}% vs aggregate_predictions {:.2}%, gap {gap:+.2} points",
        100.0 * mean(&runs.cb),
        100.0 * mean(&runs.aggregate)
    );
    ensure(gap >= -1.0, || detail.clone())?;
    Ok(detail)
}

fn variance_reduction(out: &Path) -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let mut ema = ExperimentConfig {
        output_dir: out.join("ema"),
        ..ExperimentConfig::default()
    };
    ema.train.averaging = Averaging::Ema;
    let mut none = ExperimentConfig {
        output_dir: out.join("none"),
        ..ExperimentConfig::default()
    };
    none.train.averaging = Averaging::None;
    let a = run_seed_sweep(&ema, &seeds, None)
        .map_err(|e| e.to_string())?
        .summary
        .report;
    let b = run_seed_sweep(&none, &seeds, None)
        .map_err(|e| e.to_string())?
        .summary
        .report;
    let detail = format!(
        "variance {:.4} (ema) vs {:.4} (none); bias² {:.4} vs {:.4}",
        a.variance, b.variance, a.bias_sq, b.bias_sq
    );
    ensure(a.variance <= b.variance, || detail.clone())?;
    Ok(detail)
}

fn determinism(out: &Path) -> Outcome {
    let cfg = ExperimentConfig {
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let first = run_single(&cfg, 11).map_err(|e| e.to_string())?;
    let ck_first = fs::read(&first.checkpoint_path).map_err(|e| e.to_string())?;
    let second = run_single(&cfg, 11).map_err(|e| e.to_string())?;
    let ck_second = fs::read(&second.checkpoint_path).map_err(|e| e.to_string())?;
    ensure(ck_first == ck_second, || "checkpoints differ".into())?;
    ensure(
        first.eval == second.eval && first.raw_eval == second.raw_eval,
        || "eval reports differ".into(),
    )?;
    let strip = |r: &RunRecord| RunRecord {
        wall_clock_seconds: 0.0,
        ..r.clone()
    };
    ensure(strip(&first) == strip(&second), || {
        "run records differ".into()
    })?;
    Ok(format!(
        "checkpoint of {} bytes and reports identical across reruns",
        ck_first.len()
    ))
}

fn running_stats_equivalence() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (train_ds, _) = cfg.dataset.build(2).map_err(|e| e.to_string())?;
    let mut model = DamelModel::init(&cfg.model, 2).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        epochs: 3,
        ..cfg.train.clone()
    };
    let mut avg = AveragingState::None;
    damel::training::train(&mut model, &train_ds, &train_cfg, &mut avg, None, 2)
        .map_err(|e| e.to_string())?;
    let mut whole = model.clone();
    let mut chunked = model.clone();
    recompute_running_stats_in_chunks(&mut whole, &train_ds, 1).map_err(|e| e.to_string())?;
    recompute_running_stats_in_chunks(&mut chunked, &train_ds, 4).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (a, b) in whole.norm_states.iter().zip(&chunked.norm_states) {
        for (x, y) in a
            .running_mean
            .iter()
            .chain(&a.running_var)
            .zip(b.running_mean.iter().chain(&b.running_var))
        {
            worst = worst.max((x - y).abs());
            entries += 1;
        }
    }
    ensure(entries > 0, || "model has no norm layers".into())?;
    ensure(worst <= 1e-10, || format!("max difference {worst:e}"))?;
    Ok(format!("{entries} statistics, max difference {worst:.1e}"))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => println!("FAIL  {name}: {detail}"),
        }
        results.push((name, outcome));
    };
    report("1 gradient correctness", gradient_correctness());
    report("2 detach wall", detach_wall());
    report("3 EMA/SWA closed form", ema_closed_form());
    report("4 decomposition identity", decomposition_identity());
    report("5 long-tail profile", long_tail_profile());
    match trend_runs(&tmp.path().join("trends")) {
        Ok(runs) => {
            report("6 rebalancing trend", rebalancing_trend(&runs));
            report(
                "7 representation vs prediction aggregation",
                aggregation_trend(&runs),
            );
        }
        Err(e) => {
            report("6 rebalancing trend", Err(e.clone()));
            report("7 representation vs prediction aggregation", Err(e));
        }
    }
    report(
        "8 variance reduction",
        variance_reduction(&tmp.path().join("variance")),
    );
    report(
        "9 determinism",
        determinism(&tmp.path().join("determinism")),
    );
    report("10 running-stats equivalence", running_stats_equivalence());

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
