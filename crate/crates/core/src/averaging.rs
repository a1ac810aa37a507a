//! Time-axis ensembling of the network weights.
//!
//! Both averages work on the flat parameter vector of
//! [`DamelModel::flatten`](crate::model::DamelModel::flatten), which includes
//! norm-layer scale/shift but not running statistics. After averaged weights
//! are loaded, [`recompute_running_stats`] rebuilds the statistics from the
//! training set.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::DamelModel;
use crate::tensor::MomentAccumulator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Ema,
    Swa,
    None,
}

/// `θ_EMA ← (1 − β)·θ_EMA + β·θ`. The first update copies `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    theta: Vec<f64>,
    beta: f64,
    updates: usize,
}

impl EmaState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::contract(format!(
                "EMA beta must be in (0, 1], got {beta}"
            )));
        }
        Ok(EmaState {
            theta: Vec::new(),
            beta,
            updates: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.is_initialized().then_some(&self.theta[..])
    }

    pub fn update(&mut self, theta: &[f64]) -> Result<()> {
        if !self.is_initialized() {
            self.theta = theta.to_vec();
        } else {
            if theta.len() != self.theta.len() {
                return Err(Error::contract(format!(
                    "EMA holds {} weights, update has {}",
                    self.theta.len(),
                    theta.len()
                )));
            }
            let b = self.beta;
            for (avg, &v) in self.theta.iter_mut().zip(theta) {
                *avg = (1.0 - b) * *avg + b * v;
            }
        }
        self.updates += 1;
        Ok(())
    }
}

/// Running arithmetic mean of weight snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwaState {
    theta_bar: Vec<f64>,
    n: usize,
}

impl SwaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshots(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> Option<&[f64]> {
        (self.n > 0).then_some(&self.theta_bar[..])
    }

    pub fn update(&mut self, theta: &[f64]) -> Result<()> {
        if self.n == 0 {
            self.theta_bar = theta.to_vec();
        } else {
            if theta.len() != self.theta_bar.len() {
                return Err(Error::contract(format!(
                    "SWA holds {} weights, update has {}",
                    self.theta_bar.len(),
                    theta.len()
                )));
            }
            let n = self.n as f64;
            for (avg, &v) in self.theta_bar.iter_mut().zip(theta) {
                *avg = (n * *avg + v) / (n + 1.0);
            }
        }
        self.n += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AveragingState {
    Ema(EmaState),
    Swa(SwaState),
    None,
}

impl AveragingState {
    pub fn for_method(method: Averaging, beta: f64) -> Result<Self> {
        Ok(match method {
            Averaging::Ema => AveragingState::Ema(EmaState::new(beta)?),
            Averaging::Swa => AveragingState::Swa(SwaState::new()),
            Averaging::None => AveragingState::None,
        })
    }

    pub fn method(&self) -> Averaging {
        match self {
            AveragingState::Ema(_) => Averaging::Ema,
            AveragingState::Swa(_) => Averaging::Swa,
            AveragingState::None => Averaging::None,
        }
    }

    pub fn ingest(&mut self, theta: &[f64]) -> Result<()> {
        match self {
            AveragingState::Ema(s) => s.update(theta),
            AveragingState::Swa(s) => s.update(theta),
            AveragingState::None => Ok(()),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.weights().is_some() || matches!(self, AveragingState::None)
    }

    /// The aggregated weights, when there are any.
    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            AveragingState::Ema(s) => s.weights(),
            AveragingState::Swa(s) => s.weights(),
            AveragingState::None => None,
        }
    }
}

/// Weights the evaluation should use: the EMA or SWA aggregate, or the raw
/// trained weights when no averaging is configured.
pub fn export_eval_weights(state: &AveragingState, trained: &[f64]) -> Result<Vec<f64>> {
    match state {
        AveragingState::None => Ok(trained.to_vec()),
        _ => state
            .weights()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::contract("averaging state has not ingested any weights")),
    }
}

/// Rows per forward pass in [`recompute_running_stats`].
pub const STATS_CHUNK_ROWS: usize = 512;

/// Replace every norm layer's running statistics with the exact population
/// mean/variance of its input over `train`.
///
/// Layers are fixed in depth order: the backbone layers one at a time, then
/// all expert layers together (they only depend on the backbone). Each pass
/// normalizes the already-fixed layers with their new statistics, so the
/// result is what evaluation will actually see.
pub fn recompute_running_stats(model: &mut DamelModel, train: &Dataset) -> Result<()> {
    let chunks = train.len().div_ceil(STATS_CHUNK_ROWS).max(1);
    recompute_running_stats_in_chunks(model, train, chunks)
}

/// [`recompute_running_stats`] with the training set split into `chunks`
/// contiguous pieces.
pub fn recompute_running_stats_in_chunks(
    model: &mut DamelModel,
    train: &Dataset,
    chunks: usize,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::contract(
            "cannot recompute statistics from an empty dataset",
        ));
    }
    if chunks == 0 {
        return Err(Error::contract("chunk count must be >= 1"));
    }
    if !model.has_norm_layers() {
        return Ok(());
    }
    for s in &mut model.norm_states {
        s.reset();
    }
    let layers = model.norm_states.len();
    let levels: Vec<Vec<usize>> = vec![vec![0], vec![1], (2..layers).collect()];
    let rows = train.len().div_ceil(chunks);
    let all: Vec<usize> = (0..train.len()).collect();
    for level in levels.into_iter().filter(|l| !l.is_empty()) {
        let mut accs: Vec<MomentAccumulator> = level
            .iter()
            .map(|&j| MomentAccumulator::new(model.norm_states[j].features()))
            .collect();
        for idx in all.chunks(rows) {
            let (x, _) = train.gather(idx);
            let acts = model.pre_norm_activations(&x)?;
            for (acc, &j) in accs.iter_mut().zip(&level) {
                acc.push_rows(acts[j].values());
            }
        }
        for (acc, &j) in accs.iter().zip(&level) {
            model.norm_states[j].set_from(acc)?;
        }
    }
    Ok(())
}
