use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-feature running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStatsState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub mode: NormMode,
    pub eps: f64,
}

impl NormStatsState {
    pub const DEFAULT_EPS: f64 = 1e-7;

    pub fn new(features: usize) -> Self {
        NormStatsState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            mode: NormMode::Train,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn reset(&mut self) {
        self.running_mean.iter_mut().for_each(|m| *m = 0.0);
        self.running_var.iter_mut().for_each(|v| *v = 1.0);
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub(crate) fn blend(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, &m) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }

    /// Overwrite the running statistics with exact aggregates.
    pub fn set_from(&mut self, acc: &MomentAccumulator) -> Result<()> {
        if acc.features() != self.features() {
            return Err(Error::contract(format!(
                "statistics for {} features written into a {}-feature norm layer",
                acc.features(),
                self.features()
            )));
        }
        if acc.count() == 0 {
            return Err(Error::contract("no samples accumulated"));
        }
        self.running_mean.copy_from_slice(&acc.mean);
        self.running_var = acc.population_variance();
        Ok(())
    }
}

/// Exact per-feature mean and M2 over a stream of row chunks. Chunks combine
/// with the pairwise update of Chan et al., so the result does not depend on
/// how the rows were split.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(features: usize) -> Self {
        MomentAccumulator {
            count: 0,
            mean: vec![0.0; features],
            m2: vec![0.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Ingest a row-major `rows × features` block.
    pub fn push_rows(&mut self, values: &[f64]) {
        let f = self.features();
        assert_eq!(values.len() % f, 0, "row block width mismatch");
        let rows = values.len() / f;
        if rows == 0 {
            return;
        }
        let mut chunk = MomentAccumulator::new(f);
        chunk.count = rows;
        for row in values.chunks_exact(f) {
            for (m, &x) in chunk.mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        chunk.mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in values.chunks_exact(f) {
            for ((s, &m), &x) in chunk.m2.iter_mut().zip(&chunk.mean).zip(row) {
                *s += (x - m) * (x - m);
            }
        }
        self.merge(&chunk);
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        assert_eq!(self.features(), other.features());
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn population_variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|s| (s / n).max(0.0)).collect()
    }
}
