//! Losses, SGD with momentum and the end-to-end training loop.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::averaging::{recompute_running_stats, Averaging, AveragingState};
use crate::data::{minibatch_iterator, Dataset, LongTailSpec};
use crate::error::{Error, Result};
use crate::model::{argmax, softmax, DamelModel, ForwardOutput, ParamGroup, Params};
use crate::tensor::{NormMode, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaFrequency {
    Epoch,
    Iteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Coefficient on the auxiliary classifier's loss.
    pub lambda_cb: f64,
    pub beta_ema: f64,
    pub ema_frequency: EmaFrequency,
    pub averaging: Averaging,
    /// Train the experts first, then the auxiliary classifier alone.
    pub decoupled: bool,
    /// When false the auxiliary classifier is trained with unweighted
    /// cross-entropy instead of the class-balanced loss.
    pub cb_loss_enabled: bool,
    /// Evaluate on the test set every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            lambda_cb: 1.0,
            beta_ema: 0.1,
            ema_frequency: EmaFrequency::Epoch,
            averaging: Averaging::Ema,
            decoupled: false,
            cb_loss_enabled: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!(
                "train.lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.beta_ema > 0.0 && self.beta_ema <= 1.0) {
            return Err(Error::config(format!(
                "train.beta_ema must be in (0, 1], got {}",
                self.beta_ema
            )));
        }
        if !self.lambda_cb.is_finite() || self.lambda_cb < 0.0 {
            return Err(Error::config(format!(
                "train.lambda_cb must be >= 0, got {}",
                self.lambda_cb
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Epochs spent on representations before the classifier-only phase of
    /// decoupled training.
    pub fn representation_epochs(&self) -> usize {
        if self.decoupled {
            self.epochs.div_ceil(2)
        } else {
            self.epochs
        }
    }
}

/// Which terms enter the total loss and which parameters move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Everything, end to end.
    Joint,
    /// Expert cross-entropy only; the auxiliary classifier stays fixed.
    Representation,
    /// Auxiliary loss only, with the backbone in eval mode.
    Classifier,
}

/// `weight_l ∝ 1/N_l`, scaled so the weights average to one.
pub fn class_balanced_weights(spec: &LongTailSpec) -> Vec<f64> {
    let inv: Vec<f64> = spec.counts().iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    let classes = inv.len() as f64;
    inv.into_iter().map(|w| w * classes / total).collect()
}

/// Tracked loss terms of one step.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub per_expert_ce: Vec<Tensor>,
    /// Auxiliary classifier loss, summed over heads.
    pub cb: Tensor,
    pub total: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub per_expert_ce: Vec<f64>,
    pub cb: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self) -> LossValues {
        let item = |t: &Tensor| t.item().unwrap();
        LossValues {
            per_expert_ce: self.per_expert_ce.iter().map(item).collect(),
            cb: item(&self.cb),
            total: item(&self.total),
        }
    }
}

/// Expert cross-entropies, the auxiliary loss and their combination
/// `λ·L_CB + Σ_k L_CE^k` (restricted to one side in the decoupled phases).
pub fn compute_losses(
    tape: &Tape,
    out: &ForwardOutput,
    labels: &[usize],
    spec: &LongTailSpec,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<LossBundle> {
    let per_expert_ce = out
        .expert_logits
        .iter()
        .map(|logits| tape.softmax_cross_entropy(logits, labels, None))
        .collect::<Result<Vec<_>>>()?;
    let weights = cfg.cb_loss_enabled.then(|| class_balanced_weights(spec));
    let mut heads = out
        .aux_logits
        .iter()
        .map(|logits| tape.softmax_cross_entropy(logits, labels, weights.as_deref()));
    let mut cb = heads
        .next()
        .ok_or_else(|| Error::contract("forward output has no auxiliary head"))??;
    for h in heads {
        cb = tape.add(&cb, &h?)?;
    }
    let ce_sum = per_expert_ce[1..]
        .iter()
        .try_fold(per_expert_ce[0].clone(), |acc, t| tape.add(&acc, t))?;
    let weighted_cb = tape.scale(&cb, cfg.lambda_cb)?;
    let total = match phase {
        Phase::Joint => tape.add(&weighted_cb, &ce_sum)?,
        Phase::Representation => ce_sum,
        Phase::Classifier => weighted_cb,
    };
    Ok(LossBundle {
        per_expert_ce,
        cb,
        total,
    })
}

/// Momentum buffer aligned with the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: usize) -> Self {
        OptimizerState {
            velocity: vec![0.0; params],
        }
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `v ← μ·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::contract(format!(
            "sgd_step: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "gradient entry {i} is {}",
            grads[i]
        )));
    }
    for ((p, v), g) in params.iter_mut().zip(&mut state.velocity).zip(grads) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub per_expert_ce: Vec<f64>,
    pub cb: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc_raw: Option<f64>,
    pub test_acc_avg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    /// Columns: `epoch, per_expert_ce_0..K−1, cb, total, train_acc,
    /// test_acc_raw, test_acc_ema`. Missing test accuracies are empty cells.
    pub fn to_csv(&self, experts: usize) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string()];
        header.extend((0..experts).map(|k| format!("per_expert_ce_{k}")));
        header
            .extend(["cb", "total", "train_acc", "test_acc_raw", "test_acc_ema"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.epochs {
            let mut row = vec![m.epoch.to_string()];
            row.extend(m.per_expert_ce.iter().map(f64::to_string));
            row.extend([
                m.cb.to_string(),
                m.total.to_string(),
                m.train_acc.to_string(),
                opt(m.test_acc_raw),
                opt(m.test_acc_avg),
            ]);
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::contract(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path, experts: usize) -> Result<()> {
        fs::write(path, self.to_csv(experts)?).map_err(|e| Error::io(path, e))
    }
}

/// Everything an observer can inspect after backward on one step.
pub struct StepContext<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub phase: Phase,
    pub tape: &'a Tape,
    pub losses: &'a LossBundle,
    pub bound: &'a Params,
    pub segments: &'a [(ParamGroup, Range<usize>)],
    /// Flat gradient of `losses.total`.
    pub grads: &'a [f64],
}

impl StepContext<'_> {
    /// Flat gradient of any tracked scalar on this step's tape.
    pub fn gradient_of(&self, scalar: &Tensor) -> Result<Vec<f64>> {
        let g = self.tape.backward(scalar)?;
        Ok(DamelModel::flat_grads(self.bound, &g))
    }
}

pub type StepObserver<'o> = dyn FnMut(&StepContext<'_>) -> Result<()> + 'o;

fn accuracy(model: &DamelModel, ds: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let (x, labels) = ds.gather(&all);
    let pred = model.predict(&x)?;
    let hits = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of `weights` after recomputing normalization statistics on
/// `train`.
fn averaged_accuracy(
    model: &DamelModel,
    weights: &[f64],
    train: &Dataset,
    test: &Dataset,
) -> Result<f64> {
    let mut m = model.clone();
    m.load_flat(weights)?;
    recompute_running_stats(&mut m, train)?;
    accuracy(&m, test)
}

fn batch_hits(out: &ForwardOutput, labels: &[usize]) -> usize {
    let classes = out.aux_logits[0].shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let pred = if out.aux_logits.len() == 1 {
                argmax(out.aux_logits[0].row(r))
            } else {
                let mut mean = vec![0.0; classes];
                for head in &out.aux_logits {
                    for (m, p) in mean.iter_mut().zip(softmax(head.row(r))) {
                        *m += p;
                    }
                }
                argmax(&mean)
            };
            pred == y
        })
        .count()
}

pub fn train(
    model: &mut DamelModel,
    train_ds: &Dataset,
    cfg: &TrainConfig,
    avg: &mut AveragingState,
    test: Option<&Dataset>,
    seed: u64,
) -> Result<TrainLog> {
    train_with_observer(model, train_ds, cfg, avg, test, seed, &mut |_| Ok(()))
}

/// The training loop. Each step runs one forward pass, one backward pass on
/// the total loss and one SGD update; the averaging state ingests the live
/// weights after every step or at the end of every epoch, depending on
/// `cfg.ema_frequency`. `observer` sees every step before the update.
pub fn train_with_observer(
    model: &mut DamelModel,
    train_ds: &Dataset,
    cfg: &TrainConfig,
    avg: &mut AveragingState,
    test: Option<&Dataset>,
    seed: u64,
    observer: &mut StepObserver<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_ds.dim() != model.config().input_dim || train_ds.classes() != model.config().classes {
        return Err(Error::Dimension {
            op: "train",
            shapes: vec![
                vec![train_ds.dim(), train_ds.classes()],
                vec![model.config().input_dim, model.config().classes],
            ],
        });
    }
    if model.has_norm_layers() && cfg.batch_size < 2 {
        return Err(Error::contract(
            "norm layers need a batch size of at least 2",
        ));
    }
    let spec = train_ds.long_tail_spec()?;
    let segments = model.segments();
    let mut opt = OptimizerState::new(model.param_count());
    let mut log = TrainLog::default();
    let mut iteration = 0;
    let batch_size = cfg.batch_size.min(train_ds.len());

    for epoch in 0..cfg.epochs {
        let phase = match (cfg.decoupled, epoch < cfg.representation_epochs()) {
            (false, _) => Phase::Joint,
            (true, true) => Phase::Representation,
            (true, false) => Phase::Classifier,
        };
        if cfg.decoupled && epoch == cfg.representation_epochs() {
            opt.reset();
        }
        model.set_norm_mode(match phase {
            Phase::Classifier => NormMode::Eval,
            _ => NormMode::Train,
        });

        let experts = model.config().expert_blocks();
        let mut ce_sums = vec![0.0; experts];
        let (mut cb_sum, mut total_sum, mut batches, mut hits, mut seen) =
            (0.0, 0.0, 0usize, 0usize, 0usize);
        for batch in minibatch_iterator(train_ds, batch_size, seed, epoch)? {
            // A single row has no batch variance.
            if model.has_norm_layers() && phase != Phase::Classifier && batch.labels.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let out = model.forward(&tape, Some(&bound), &batch.features)?;
            let losses = compute_losses(&tape, &out, &batch.labels, &spec, cfg, phase)?;
            let values = losses.values();
            if !values.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {epoch}, iteration {iteration}",
                    values.total
                )));
            }
            let grads = tape.backward(&losses.total)?;
            let flat_grads = DamelModel::flat_grads(&bound, &grads);
            observer(&StepContext {
                epoch,
                iteration,
                phase,
                tape: &tape,
                losses: &losses,
                bound: &bound,
                segments: &segments,
                grads: &flat_grads,
            })?;
            let mut theta = model.flatten();
            sgd_step(&mut theta, &flat_grads, &mut opt, cfg.lr, cfg.momentum).map_err(|e| {
                Error::Numeric(format!("{e} at epoch {epoch}, iteration {iteration}"))
            })?;
            model.load_flat(&theta)?;
            if cfg.ema_frequency == EmaFrequency::Iteration {
                avg.ingest(&theta)?;
            }

            for (s, v) in ce_sums.iter_mut().zip(&values.per_expert_ce) {
                *s += v;
            }
            cb_sum += values.cb;
            total_sum += values.total;
            batches += 1;
            hits += batch_hits(&out, &batch.labels);
            seen += batch.labels.len();
            iteration += 1;
        }
        if cfg.ema_frequency == EmaFrequency::Epoch {
            avg.ingest(&model.flatten())?;
        }

        let n = batches.max(1) as f64;
        let evaluate_now = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let (test_acc_raw, test_acc_avg) = match test {
            Some(test) if evaluate_now => {
                let raw = accuracy(model, test)?;
                let averaged = avg
                    .weights()
                    .map(|w| averaged_accuracy(model, w, train_ds, test))
                    .transpose()?;
                (Some(raw), averaged)
            }
            _ => (None, None),
        };
        log.epochs.push(EpochMetrics {
            epoch,
            per_expert_ce: ce_sums.iter().map(|s| s / n).collect(),
            cb: cb_sum / n,
            total: total_sum / n,
            train_acc: hits as f64 / seen.max(1) as f64,
            test_acc_raw,
            test_acc_avg,
        });
    }
    model.set_norm_mode(NormMode::Train);
    Ok(log)
}
