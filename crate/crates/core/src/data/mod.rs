//! Long-tailed training sets: the exponential class-count profile, a
//! Gaussian-mixture generator, subsampling of ingested balanced data, the
//! Many/Medium/Few grouping and epoch minibatching.

mod ingest;

pub use ingest::{encode_idx, load_csv_dataset, load_idx_dataset, read_idx, IdxArray};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Per-class training counts sorted in non-increasing order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongTailSpec {
    counts: Vec<usize>,
}

impl LongTailSpec {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::contract(
                "long-tail profile needs at least one class",
            ));
        }
        if let Some(l) = counts.iter().position(|&n| n == 0) {
            return Err(Error::contract(format!("class {l} has no samples")));
        }
        if counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::contract(format!(
                "class counts must be sorted non-increasing, got {counts:?}"
            )));
        }
        Ok(LongTailSpec { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// Imbalance ratio `N₁ / N_L` of the realized counts.
    pub fn gamma(&self) -> f64 {
        self.counts[0] as f64 / *self.counts.last().unwrap() as f64
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Exponentially decaying profile `N_k = N₁·(1/γ)^((k−1)/(L−1))`, rounded
/// half-up with a floor of one.
pub fn long_tail_counts(classes: usize, n1: usize, gamma: f64) -> Result<LongTailSpec> {
    if classes < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n1 < 1 {
        return Err(Error::Domain("N1 must be at least 1".into()));
    }
    if !gamma.is_finite() || gamma < 1.0 {
        return Err(Error::Domain(format!(
            "imbalance ratio must be >= 1, got {gamma}"
        )));
    }
    if (n1 as f64) / gamma < 1.0 {
        return Err(Error::InfeasibleTail { n1, gamma });
    }
    let last = (classes - 1) as f64;
    let counts = (0..classes)
        .map(|k| {
            // Dividing by γ^t keeps both endpoints exact: t = 0 gives N₁ and
            // t = 1 gives N₁/γ with no intermediate rounding.
            let x = n1 as f64 / gamma.powf(k as f64 / last);
            ((x + 0.5).floor() as usize).max(1)
        })
        .collect();
    LongTailSpec::from_counts(counts)
}

/// Feature matrix plus labels. Rows are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                shapes: vec![vec![features.len()], vec![labels.len(), dim]],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                bound: classes,
            });
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Label tally per class.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// The tally as a validated long-tail profile.
    pub fn long_tail_spec(&self) -> Result<LongTailSpec> {
        LongTailSpec::from_counts(self.counts())
    }

    /// Rows `indices` as a `len × dim` tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_parts(vec![indices.len(), self.dim], values),
            labels,
        )
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (x, labels) = self.gather(indices);
        Dataset {
            features: x.into_values(),
            dim: self.dim,
            labels,
            classes: self.classes,
        }
    }
}

/// Isotropic unit-variance Gaussian classes centred at `class_sep · u_l`.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    centers: Vec<Vec<f64>>,
    dim: usize,
}

impl GaussianMixture {
    /// Center directions `u_l` are drawn uniformly on the sphere from `seed`.
    pub fn new(classes: usize, dim: usize, class_sep: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::contract(format!(
                "feature dimension must be >= 2, got {dim}"
            )));
        }
        if class_sep.is_nan() || class_sep <= 0.0 {
            return Err(Error::contract(format!(
                "class_sep must be > 0, got {class_sep}"
            )));
        }
        if classes == 0 {
            return Err(Error::contract("mixture needs at least one class"));
        }
        let mut rng = rng::stream(seed, Purpose::Centers, 0);
        let centers = (0..classes)
            .map(|_| loop {
                let u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break u.iter().map(|v| class_sep * v / norm).collect();
                }
            })
            .collect();
        Ok(GaussianMixture { centers, dim })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Draw `counts[l]` points for every class `l`, class-major.
    pub fn sample(&self, counts: &[usize], seed: u64, purpose: Purpose) -> Result<Dataset> {
        if counts.len() != self.centers.len() {
            return Err(Error::Dimension {
                op: "gaussian_mixture",
                shapes: vec![vec![counts.len()], vec![self.centers.len()]],
            });
        }
        let mut features = Vec::with_capacity(counts.iter().sum::<usize>() * self.dim);
        let mut labels = Vec::new();
        for (l, (&n, center)) in counts.iter().zip(&self.centers).enumerate() {
            let mut rng = rng::stream(seed, purpose, l as u64);
            for _ in 0..n {
                for c in center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(c + z);
                }
                labels.push(l);
            }
        }
        Dataset::new(features, self.dim, labels, self.centers.len())
    }

    pub fn sample_longtail(&self, spec: &LongTailSpec, seed: u64) -> Result<Dataset> {
        self.sample(spec.counts(), seed, Purpose::TrainSamples)
    }

    /// Class-balanced companion set from the same centers.
    pub fn sample_balanced(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        self.sample(
            &vec![per_class; self.centers.len()],
            seed,
            Purpose::TestSamples,
        )
    }
}

/// Long-tailed Gaussian-mixture training set. Centers and samples both derive
/// from `seed`.
pub fn synthesize_gaussian_longtail(
    spec: &LongTailSpec,
    dim: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    GaussianMixture::new(spec.classes(), dim, class_sep, seed)?.sample_longtail(spec, seed)
}

/// Indices retained by [`subsample_longtail`], in ascending order.
pub fn subsample_indices(source: &Dataset, spec: &LongTailSpec, seed: u64) -> Result<Vec<usize>> {
    if spec.classes() != source.classes() {
        return Err(Error::contract(format!(
            "profile has {} classes but the source has {}",
            spec.classes(),
            source.classes()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); source.classes()];
    for (i, &y) in source.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::with_capacity(spec.total());
    for (l, (mut idx, &need)) in by_class.into_iter().zip(spec.counts()).enumerate() {
        if idx.len() < need {
            return Err(Error::Capacity {
                class: l,
                needed: need,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng::stream(seed, Purpose::Subsample, l as u64));
        keep.extend_from_slice(&idx[..need]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Keep `spec.counts()[l]` seed-shuffled samples of every class `l`. Rows are
/// copied unchanged.
pub fn subsample_longtail(source: &Dataset, spec: &LongTailSpec, seed: u64) -> Result<Dataset> {
    Ok(source.select(&subsample_indices(source, spec, seed)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];
}

/// Classes split by training count: `> hi` many, `< lo` few, the rest medium.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
    pub hi: usize,
    pub lo: usize,
}

impl GroupPartition {
    pub const DEFAULT_HI: usize = 100;
    pub const DEFAULT_LO: usize = 20;

    pub fn members(&self, group: Group) -> &[usize] {
        match group {
            Group::Many => &self.many,
            Group::Medium => &self.medium,
            Group::Few => &self.few,
        }
    }

    pub fn group_of(&self, class: usize) -> Option<Group> {
        Group::ALL
            .into_iter()
            .find(|&g| self.members(g).contains(&class))
    }
}

pub fn group_partition(spec: &LongTailSpec, hi: usize, lo: usize) -> Result<GroupPartition> {
    if !(hi > lo && lo >= 1) {
        return Err(Error::contract(format!(
            "group thresholds need hi > lo >= 1, got hi={hi} lo={lo}"
        )));
    }
    let mut p = GroupPartition {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
        hi,
        lo,
    };
    for (l, &n) in spec.counts().iter().enumerate() {
        if n > hi {
            p.many.push(l);
        } else if n < lo {
            p.few.push(l);
        } else {
            p.medium.push(l);
        }
    }
    Ok(p)
}

/// One minibatch of an epoch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// The permutation of `0..n` used for `epoch`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Minibatch, epoch as u64));
    order
}

/// Chunks one seeded permutation of the dataset into `⌈N/B⌉` batches; the
/// last one may be short.
pub fn minibatch_iterator(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::contract(format!(
            "batch size must be in 1..={}, got {batch_size}",
            ds.len()
        )));
    }
    let order = epoch_permutation(ds.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |indices| {
        let (features, labels) = ds.gather(&indices);
        Batch {
            indices,
            features,
            labels,
        }
    }))
}
