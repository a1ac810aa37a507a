//! Config-driven runs, seed sweeps and ablation suites.
//!
//! Every run writes `run.json`, `metrics.csv`, `confusion.csv` and
//! `checkpoint.bin` to `output_dir/<suite>/<cell>/<seed>/`.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, MAGIC};

use crate::averaging::{export_eval_weights, recompute_running_stats, Averaging, AveragingState};
use crate::data::{
    group_partition, load_csv_dataset, load_idx_dataset, long_tail_counts, subsample_longtail,
    Dataset, GaussianMixture, Group, GroupPartition, LongTailSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    bias_variance_decompose, evaluate, BiasVarianceReport, EvalReport, PredictionMatrix,
};
use crate::model::{DamelConfig, DamelModel, Variant};
use crate::training::{train, EmaFrequency, TrainConfig};

pub const WORKERS_ENV: &str = "DAMEL_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    #[serde(alias = "L")]
    pub classes: usize,
    #[serde(alias = "N1")]
    pub n1: usize,
    pub gamma: f64,
    /// Feature dimension of synthetic data.
    #[serde(alias = "d")]
    pub dim: usize,
    pub class_sep: f64,
    pub test_per_class: usize,
    /// Fixes the mixture centers, shared by every seed.
    pub center_seed: u64,
    /// Fixes the test set, shared by every seed.
    pub test_seed: u64,
    pub group_hi: usize,
    pub group_lo: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            classes: 10,
            n1: 500,
            gamma: 100.0,
            dim: 20,
            class_sep: 3.0,
            test_per_class: 100,
            center_seed: 0,
            test_seed: 1,
            group_hi: GroupPartition::DEFAULT_HI,
            group_lo: GroupPartition::DEFAULT_LO,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_csv: None,
            test_csv: None,
        }
    }
}

impl DatasetConfig {
    pub fn profile(&self) -> Result<LongTailSpec> {
        long_tail_counts(self.classes, self.n1, self.gamma)
            .map_err(|e| Error::config(format!("dataset profile: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.profile()?;
        if self.test_per_class == 0 {
            return Err(Error::config("dataset.test_per_class must be >= 1"));
        }
        if !(self.group_hi > self.group_lo && self.group_lo >= 1) {
            return Err(Error::config(
                "dataset group thresholds need group_hi > group_lo >= 1",
            ));
        }
        let need = |field: &Option<PathBuf>, name: &str| {
            field
                .as_ref()
                .map(|_| ())
                .ok_or_else(|| Error::config(format!("dataset.{name} is required for this source")))
        };
        match self.source {
            DatasetSource::Synthetic => {
                if self.dim == 0 || !self.class_sep.is_finite() || self.class_sep <= 0.0 {
                    return Err(Error::config(
                        "synthetic data needs dim >= 1 and a finite class_sep > 0",
                    ));
                }
            }
            DatasetSource::Idx => {
                need(&self.train_images, "train_images")?;
                need(&self.train_labels, "train_labels")?;
                need(&self.test_images, "test_images")?;
                need(&self.test_labels, "test_labels")?;
            }
            DatasetSource::Csv => {
                need(&self.train_csv, "train_csv")?;
                need(&self.test_csv, "test_csv")?;
            }
        }
        Ok(())
    }

    fn with_classes(&self, ds: Dataset, path: &Path) -> Result<Dataset> {
        if ds.classes() > self.classes {
            return Err(Error::config(format!(
                "{} has labels up to {} but dataset.classes is {}",
                path.display(),
                ds.classes() - 1,
                self.classes
            )));
        }
        Dataset::new(
            ds.features().to_vec(),
            ds.dim(),
            ds.labels().to_vec(),
            self.classes,
        )
    }

    /// Long-tailed training set for `seed` and the shared balanced test set.
    pub fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let spec = self.profile()?;
        let balanced = LongTailSpec::from_counts(vec![self.test_per_class; self.classes])?;
        match self.source {
            DatasetSource::Synthetic => {
                let mix =
                    GaussianMixture::new(self.classes, self.dim, self.class_sep, self.center_seed)?;
                Ok((
                    mix.sample_longtail(&spec, seed)?,
                    mix.sample_balanced(self.test_per_class, self.test_seed)?,
                ))
            }
            DatasetSource::Idx | DatasetSource::Csv => {
                let (train_src, train_path, test_src, test_path) =
                    if self.source == DatasetSource::Idx {
                        let (ti, tl) = (
                            self.train_images.as_ref().unwrap(),
                            self.train_labels.as_ref().unwrap(),
                        );
                        let (vi, vl) = (
                            self.test_images.as_ref().unwrap(),
                            self.test_labels.as_ref().unwrap(),
                        );
                        (load_idx_dataset(ti, tl)?, tl, load_idx_dataset(vi, vl)?, vl)
                    } else {
                        let (t, v) = (
                            self.train_csv.as_ref().unwrap(),
                            self.test_csv.as_ref().unwrap(),
                        );
                        (load_csv_dataset(t)?, t, load_csv_dataset(v)?, v)
                    };
                let train_src = self.with_classes(train_src, train_path)?;
                let test_src = self.with_classes(test_src, test_path)?;
                Ok((
                    subsample_longtail(&train_src, &spec, seed)?,
                    subsample_longtail(&test_src, &balanced, self.test_seed)?,
                ))
            }
        }
    }

    pub fn partition(&self) -> Result<GroupPartition> {
        group_partition(&self.profile()?, self.group_hi, self.group_lo)
    }

    fn input_dim(&self) -> Option<usize> {
        (self.source == DatasetSource::Synthetic).then_some(self.dim)
    }
}

/// The part of a configuration that determines a run's outcome, seed aside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSetup {
    pub dataset: DatasetConfig,
    pub model: DamelConfig,
    pub train: TrainConfig,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.classes != self.dataset.classes {
            return Err(Error::config(format!(
                "model.classes ({}) differs from dataset.classes ({})",
                self.model.classes, self.dataset.classes
            )));
        }
        if let Some(d) = self.dataset.input_dim() {
            if d != self.model.input_dim {
                return Err(Error::config(format!(
                    "model.input_dim ({}) differs from dataset.dim ({d})",
                    self.model.input_dim
                )));
            }
        }
        if self.model.use_norm_layers && self.train.batch_size < 2 {
            return Err(Error::config(
                "train.batch_size must be >= 2 with norm layers",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("setup serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: DamelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            model: DamelConfig::default(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            workers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be >= 1"));
        }
        Ok(())
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}

/// Worker count: `DAMEL_WORKERS` if set, else `requested`, else the number
/// of available cores.
pub fn resolve_workers(requested: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!(
                "{WORKERS_ENV}={v:?} is not a positive integer"
            ))),
        };
    }
    match requested {
        Some(0) => Err(Error::config("worker count must be >= 1")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub suite: String,
    pub cell: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    /// Evaluation of the exported weights (averaged unless averaging is off).
    pub eval: EvalReport,
    /// Evaluation of the final trained weights.
    pub raw_eval: EvalReport,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub test_labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub raw_predictions: Vec<usize>,
    pub setup: RunSetup,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn prediction_matrix(&self) -> Result<PredictionMatrix> {
        PredictionMatrix::one_hot(&self.predictions, self.setup.model.classes)
    }

    pub fn raw_prediction_matrix(&self) -> Result<PredictionMatrix> {
        PredictionMatrix::one_hot(&self.raw_predictions, self.setup.model.classes)
    }

    pub fn label_matrix(&self) -> Result<PredictionMatrix> {
        PredictionMatrix::one_hot(&self.test_labels, self.setup.model.classes)
    }
}

pub fn run_dir(output_dir: &Path, suite: &str, cell: &str, seed: u64) -> PathBuf {
    output_dir.join(suite).join(cell).join(seed.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn predictions_and_report(
    model: &DamelModel,
    test: &Dataset,
    part: &GroupPartition,
) -> Result<(Vec<usize>, EvalReport)> {
    let all: Vec<usize> = (0..test.len()).collect();
    let (x, _) = test.gather(&all);
    Ok((model.predict(&x)?, evaluate(model, test, part)?))
}

fn execute(setup: &RunSetup, seed: u64, suite: &str, cell: &str, dir: &Path) -> Result<RunRecord> {
    let started = Instant::now();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train_ds, test_ds) = setup.dataset.build(seed)?;
    if train_ds.dim() != setup.model.input_dim {
        return Err(Error::config(format!(
            "model.input_dim ({}) differs from the data dimension ({})",
            setup.model.input_dim,
            train_ds.dim()
        )));
    }
    let partition = setup.dataset.partition()?;
    let mut model = DamelModel::init(&setup.model, seed)?;
    let mut avg = AveragingState::for_method(setup.train.averaging, setup.train.beta_ema)?;
    let log = train(
        &mut model,
        &train_ds,
        &setup.train,
        &mut avg,
        Some(&test_ds),
        seed,
    )?;
    let trained = model.flatten();
    if avg.method() != Averaging::None && !avg.is_initialized() {
        avg.ingest(&trained)?;
    }

    recompute_running_stats(&mut model, &train_ds)?;
    let (raw_predictions, raw_eval) = predictions_and_report(&model, &test_ds, &partition)?;
    let mut exported = model.clone();
    exported.load_flat(&export_eval_weights(&avg, &trained)?)?;
    recompute_running_stats(&mut exported, &train_ds)?;
    let (predictions, eval) = predictions_and_report(&exported, &test_ds, &partition)?;

    let metrics_path = dir.join("metrics.csv");
    log.write_csv(&metrics_path, setup.model.expert_blocks())?;
    let confusion_path = dir.join("confusion.csv");
    fs::write(&confusion_path, eval.confusion_csv()?).map_err(|e| Error::io(&confusion_path, e))?;
    let checkpoint_path = dir.join("checkpoint.bin");
    Checkpoint {
        config_json: serde_json::to_string(setup)?,
        params: trained,
        averaged: avg.weights().map(<[f64]>::to_vec),
    }
    .write(&checkpoint_path)?;

    let record = RunRecord {
        suite: suite.to_string(),
        cell: cell.to_string(),
        config_hash: setup.hash(),
        seed,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        eval,
        raw_eval,
        metrics_path,
        checkpoint_path,
        test_labels: test_ds.labels().to_vec(),
        predictions,
        raw_predictions,
        setup: setup.clone(),
    };
    write_json(&dir.join("run.json"), &record)?;
    Ok(record)
}

/// Train and evaluate one configuration under `output_dir/suite/cell/seed`.
/// A failed run leaves no directory behind.
pub fn run_cell(
    setup: &RunSetup,
    seed: u64,
    output_dir: &Path,
    suite: &str,
    cell: &str,
) -> Result<RunRecord> {
    setup.validate()?;
    let dir = run_dir(output_dir, suite, cell, seed);
    execute(setup, seed, suite, cell, &dir).inspect_err(|_| {
        let _ = fs::remove_dir_all(&dir);
    })
}

pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    run_cell(&cfg.setup(), seed, &cfg.output_dir, "single", "base")
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))
}

/// Runs every `(cell, seed)` job, in parallel. Identical jobs run once.
fn run_jobs(
    jobs: &[(String, RunSetup, u64)],
    output_dir: &Path,
    suite: &str,
    workers: usize,
) -> Result<Vec<RunRecord>> {
    let mut unique: Vec<&(String, RunSetup, u64)> = Vec::new();
    let mut seen = BTreeSet::new();
    for job in jobs {
        if seen.insert((job.0.clone(), job.2)) {
            unique.push(job);
        }
    }
    let results: Vec<Result<RunRecord>> = pool(workers)?.install(|| {
        unique
            .par_iter()
            .map(|(cell, setup, seed)| {
                run_cell(setup, *seed, output_dir, suite, cell).map_err(|e| Error::Run {
                    context: format!("{suite}/{cell} with seed {seed}"),
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let mut done = BTreeMap::new();
    for (job, result) in unique.iter().zip(results) {
        done.insert((job.0.clone(), job.2), result?);
    }
    Ok(jobs
        .iter()
        .map(|(cell, _, seed)| done[&(cell.clone(), *seed)].clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub overall_acc: Vec<f64>,
    /// Decomposition of the exported-weight predictions.
    pub report: BiasVarianceReport,
    /// Decomposition of the final trained-weight predictions.
    pub raw_report: BiasVarianceReport,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub summary: SweepSummary,
    pub records: Vec<RunRecord>,
    pub summary_path: PathBuf,
}

pub fn decompose_records(records: &[RunRecord], raw: bool) -> Result<BiasVarianceReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("no run records to decompose"))?;
    let labels = first.label_matrix()?;
    let preds = records
        .iter()
        .map(|r| {
            if r.test_labels != first.test_labels {
                return Err(Error::contract(format!(
                    "seed {} used a different test set",
                    r.seed
                )));
            }
            if raw {
                r.raw_prediction_matrix()
            } else {
                r.prediction_matrix()
            }
        })
        .collect::<Result<Vec<_>>>()?;
    bias_variance_decompose(&preds, &labels, false)
}

/// One run per seed on a shared test set, followed by the bias/variance
/// decomposition of their one-hot predictions. Writes
/// `output_dir/sweep/summary.json`.
pub fn run_seed_sweep(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    if seeds.len() < 2 {
        return Err(Error::config(format!(
            "a sweep needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let workers = resolve_workers(workers.or(cfg.workers))?;
    let setup = cfg.setup();
    let jobs: Vec<_> = seeds
        .iter()
        .map(|&s| ("base".to_string(), setup.clone(), s))
        .collect();
    let records = run_jobs(&jobs, &cfg.output_dir, "sweep", workers)?;
    let summary = SweepSummary {
        config_hash: setup.hash(),
        seeds: seeds.to_vec(),
        overall_acc: records.iter().map(|r| r.eval.overall_acc).collect(),
        report: decompose_records(&records, false)?,
        raw_report: decompose_records(&records, true)?,
    };
    let summary_path = cfg.output_dir.join("sweep").join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(SweepOutcome {
        summary,
        records,
        summary_path,
    })
}

pub const SUITES: [&str; 8] = [
    "table5",
    "table7",
    "table8",
    "table9",
    "table10",
    "table11",
    "table12",
    "lambda_cb",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub name: String,
    pub setup: RunSetup,
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Standard => "standard",
        Variant::AggregatePredictions => "aggregate_predictions",
        Variant::AverageRepresentations => "average_representations",
        Variant::CapacityControlled => "capacity_controlled",
    }
}

/// Expand a named suite into its cells. Pure in `(base, suite)`.
pub fn expand_suite(base: &RunSetup, suite: &str) -> Result<Vec<SuiteCell>> {
    let cell = |name: String, edit: &dyn Fn(&mut RunSetup)| {
        let mut setup = base.clone();
        edit(&mut setup);
        SuiteCell { name, setup }
    };
    let cells = match suite {
        "table5" => [2, 3, 4]
            .into_iter()
            .flat_map(|k| {
                [Variant::AggregatePredictions, Variant::Standard].map(|v| {
                    cell(format!("k{k}-{}", variant_name(v)), &|s| {
                        s.model.experts = k;
                        s.model.variant = v;
                    })
                })
            })
            .collect(),
        "table7" => [EmaFrequency::Iteration, EmaFrequency::Epoch]
            .map(|f| {
                let name = match f {
                    EmaFrequency::Iteration => "ema-iteration",
                    EmaFrequency::Epoch => "ema-epoch",
                };
                cell(name.into(), &|s| {
                    s.train.averaging = Averaging::Ema;
                    s.train.ema_frequency = f;
                })
            })
            .to_vec(),
        "table8" => (1..=4)
            .map(|k| cell(format!("experts-{k}"), &|s| s.model.experts = k))
            .collect(),
        "table9" => [0.01, 0.05, 0.1, 0.2, 0.3]
            .map(|b| cell(format!("beta-{b}"), &|s| s.train.beta_ema = b))
            .to_vec(),
        "table10" => [8.0, 16.0, 20.0, 24.0]
            .map(|a| cell(format!("alpha-{a}"), &|s| s.model.alpha = a))
            .to_vec(),
        "table11" => [Variant::CapacityControlled, Variant::Standard]
            .map(|v| cell(variant_name(v).into(), &|s| s.model.variant = v))
            .to_vec(),
        "table12" => {
            let proposed = |s: &mut RunSetup| {
                s.model.variant = Variant::Standard;
                s.train.averaging = Averaging::Ema;
                s.train.ema_frequency = EmaFrequency::Epoch;
                s.train.cb_loss_enabled = true;
                s.train.decoupled = false;
            };
            let row = |name: &str, edit: &dyn Fn(&mut RunSetup)| {
                cell(name.into(), &|s| {
                    proposed(s);
                    edit(s);
                })
            };
            vec![
                row("proposed", &|_| {}),
                row("no-ema", &|s| s.train.averaging = Averaging::None),
                row("one-expert", &|s| s.model.experts = 1),
                row("no-cb-loss", &|s| s.train.cb_loss_enabled = false),
                row("average-representations", &|s| {
                    s.model.variant = Variant::AverageRepresentations
                }),
                row("iteration-ema", &|s| {
                    s.train.ema_frequency = EmaFrequency::Iteration
                }),
                row("swa", &|s| s.train.averaging = Averaging::Swa),
                row("beta-0.3", &|s| s.train.beta_ema = 0.3),
                row("beta-0.01", &|s| s.train.beta_ema = 0.01),
                row("decoupled", &|s| s.train.decoupled = true),
            ]
        }
        "lambda_cb" => [0.5, 1.0, 1.5, 2.0]
            .map(|l| cell(format!("lambda-{l}"), &|s| s.train.lambda_cb = l))
            .to_vec(),
        other => {
            return Err(Error::config(format!(
                "unknown suite {other:?}; valid suites: {}",
                SUITES.join(", ")
            )))
        }
    };
    for c in &cells {
        c.setup
            .validate()
            .map_err(|e| Error::config(format!("suite {suite}, cell {}: {e}", c.name)))?;
    }
    Ok(cells)
}

/// Mean and sample standard deviation.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub suite: String,
    pub cell: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub overall: Stat,
    pub many: Option<Stat>,
    pub medium: Option<Stat>,
    pub few: Option<Stat>,
}

fn comparison_row(records: &[&RunRecord]) -> ComparisonRow {
    let stat = |vals: Vec<f64>| {
        let (mean, sd) = mean_sd(&vals);
        Stat { mean, sd }
    };
    let group = |g: Group| {
        let vals: Vec<f64> = records
            .iter()
            .filter_map(|r| r.eval.group_acc.get(g))
            .collect();
        (vals.len() == records.len()).then(|| stat(vals))
    };
    ComparisonRow {
        suite: records[0].suite.clone(),
        cell: records[0].cell.clone(),
        config_hash: records[0].config_hash.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        overall: stat(records.iter().map(|r| r.eval.overall_acc).collect()),
        many: group(Group::Many),
        medium: group(Group::Medium),
        few: group(Group::Few),
    }
}

/// One row per cell: `suite, cell, runs, overall, many, medium, few` as
/// `mean±sd` percentages, then the raw means and deviations.
pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["suite", "cell", "runs", "overall", "many", "medium", "few"];
    let numeric = [
        "overall_mean",
        "overall_sd",
        "many_mean",
        "many_sd",
        "medium_mean",
        "medium_sd",
        "few_mean",
        "few_sd",
    ];
    header.extend(numeric);
    header.extend(["config_hash", "seeds"]);
    w.write_record(&header)?;
    let pm = |s: &Option<Stat>| {
        s.as_ref()
            .map(|s| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.sd))
            .unwrap_or_default()
    };
    let num = |s: &Option<Stat>| match s {
        Some(s) => [s.mean.to_string(), s.sd.to_string()],
        None => [String::new(), String::new()],
    };
    for r in rows {
        let overall = Some(r.overall.clone());
        let mut rec = vec![
            r.suite.clone(),
            r.cell.clone(),
            r.seeds.len().to_string(),
            pm(&overall),
            pm(&r.many),
            pm(&r.medium),
            pm(&r.few),
        ];
        for s in [&overall, &r.many, &r.medium, &r.few] {
            rec.extend(num(s));
        }
        rec.push(r.config_hash.clone());
        rec.push(
            r.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        );
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::contract(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub rows: Vec<ComparisonRow>,
    pub records: Vec<RunRecord>,
    pub csv_path: PathBuf,
}

/// Runs every cell of `suite` over the configured seeds and writes
/// `output_dir/<suite>/comparison.csv`.
pub fn run_ablation_suite(
    cfg: &ExperimentConfig,
    suite: &str,
    workers: Option<usize>,
) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let cells = expand_suite(&cfg.setup(), suite)?;
    let workers = resolve_workers(workers.or(cfg.workers))?;
    let seeds: Vec<u64> = {
        let mut seen = BTreeSet::new();
        cfg.seeds
            .iter()
            .copied()
            .filter(|s| seen.insert(*s))
            .collect()
    };
    let jobs: Vec<_> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(|&s| (c.name.clone(), c.setup.clone(), s)))
        .collect();
    let records = run_jobs(&jobs, &cfg.output_dir, suite, workers)?;
    let rows: Vec<ComparisonRow> = records
        .chunks(seeds.len())
        .map(|chunk| comparison_row(&chunk.iter().collect::<Vec<_>>()))
        .collect();
    let csv_path = cfg.output_dir.join(suite).join("comparison.csv");
    fs::write(&csv_path, comparison_csv(&rows)?).map_err(|e| Error::io(&csv_path, e))?;
    Ok(SuiteOutcome {
        rows,
        records,
        csv_path,
    })
}

fn collect_records(dir: &Path, out: &mut Vec<(PathBuf, RunRecord)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_records(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "run.json") {
            out.push((path.clone(), RunRecord::load(&path)?));
        }
    }
    Ok(())
}

/// Re-aggregate every `run.json` under `dir` into `dir/report.csv`, one row
/// per `(suite, cell)` in sorted order.
pub fn report(dir: &Path) -> Result<(Vec<ComparisonRow>, PathBuf)> {
    let mut found = Vec::new();
    collect_records(dir, &mut found)?;
    if found.is_empty() {
        return Err(Error::contract(format!(
            "no run.json files under {}",
            dir.display()
        )));
    }
    let mut groups: BTreeMap<(String, String), Vec<RunRecord>> = BTreeMap::new();
    for (_, r) in found {
        groups
            .entry((r.suite.clone(), r.cell.clone()))
            .or_default()
            .push(r);
    }
    let rows: Vec<ComparisonRow> = groups
        .values_mut()
        .map(|recs| {
            recs.sort_by_key(|r| r.seed);
            comparison_row(&recs.iter().collect::<Vec<_>>())
        })
        .collect();
    let path = dir.join("report.csv");
    fs::write(&path, comparison_csv(&rows)?).map_err(|e| Error::io(&path, e))?;
    Ok((rows, path))
}
