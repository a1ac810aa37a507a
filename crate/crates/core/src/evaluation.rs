//! Accuracy reports and the squared-bias / variance decomposition of
//! one-hot predictions across repeated runs.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group, GroupPartition};
use crate::error::{Error, Result};
use crate::model::DamelModel;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub many: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few: Option<f64>,
}

impl GroupAccuracy {
    pub fn get(&self, group: Group) -> Option<f64> {
        match group {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }

    fn slot(&mut self, group: Group) -> &mut Option<f64> {
        match group {
            Group::Many => &mut self.many,
            Group::Medium => &mut self.medium,
            Group::Few => &mut self.few,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_acc: f64,
    /// Absent for groups with no test samples.
    pub group_acc: GroupAccuracy,
    #[serde(rename = "M")]
    pub m: usize,
    /// `confusion[i][j]` counts samples of class `i` predicted as `j`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn confusion_csv(&self) -> Result<String> {
        let classes = self.confusion.len();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_string()];
        header.extend((0..classes).map(|j| j.to_string()));
        w.write_record(&header)?;
        for (i, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::contract(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Report from predicted and true class indices.
pub fn report_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
    partition: &GroupPartition,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("cannot evaluate an empty test set"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::Index {
                what: "label",
                index: y,
                bound: classes,
            });
        }
        if p >= classes {
            return Err(Error::Index {
                what: "prediction",
                index: p,
                bound: classes,
            });
        }
        confusion[y][p] += 1;
    }
    let m = labels.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut group_acc = GroupAccuracy::default();
    for group in Group::ALL {
        let (mut hits, mut total) = (0usize, 0usize);
        for &c in partition.members(group) {
            if c >= classes {
                return Err(Error::Index {
                    what: "partition class",
                    index: c,
                    bound: classes,
                });
            }
            hits += confusion[c][c];
            total += confusion[c].iter().sum::<usize>();
        }
        if total > 0 {
            *group_acc.slot(group) = Some(hits as f64 / total as f64);
        }
    }
    Ok(EvalReport {
        overall_acc: correct as f64 / m as f64,
        group_acc,
        m,
        confusion,
    })
}

/// Overall and group-wise accuracy of the model's auxiliary-classifier
/// predictions on `test`.
pub fn evaluate(
    model: &DamelModel,
    test: &Dataset,
    partition: &GroupPartition,
) -> Result<EvalReport> {
    let classes = model.config().classes;
    if let Some(&y) = test.labels().iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            what: "label",
            index: y,
            bound: classes,
        });
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let (x, labels) = test.gather(&all);
    let predictions = model.predict(&x)?;
    report_from_predictions(&predictions, &labels, classes, partition)
}

/// Dense `rows × classes` matrix, usually holding one-hot rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub rows: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl PredictionMatrix {
    pub fn new(rows: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * classes {
            return Err(Error::Dimension {
                op: "prediction_matrix",
                shapes: vec![vec![rows, classes], vec![values.len()]],
            });
        }
        Ok(PredictionMatrix {
            rows,
            classes,
            values,
        })
    }

    pub fn one_hot(indices: &[usize], classes: usize) -> Result<Self> {
        let mut values = vec![0.0; indices.len() * classes];
        for (m, &c) in indices.iter().enumerate() {
            if c >= classes {
                return Err(Error::Index {
                    what: "class",
                    index: c,
                    bound: classes,
                });
            }
            values[m * classes + c] = 1.0;
        }
        Ok(PredictionMatrix {
            rows: indices.len(),
            classes,
            values,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.classes..(m + 1) * self.classes]
    }
}

/// Indicator rows of `model.predict` over `test`.
pub fn one_hot_predictions(model: &DamelModel, test: &Dataset) -> Result<PredictionMatrix> {
    let all: Vec<usize> = (0..test.len()).collect();
    let (x, _) = test.gather(&all);
    PredictionMatrix::one_hot(&model.predict(&x)?, model.config().classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTerms {
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleTerms>>,
}

/// With `p̄` the mean prediction over runs: `bias² = (1/M)Σ‖y − p̄‖²`,
/// `variance = (1/SM)Σ‖p − p̄‖²`, `mse = (1/SM)Σ‖y − p‖²`.
pub fn bias_variance_decompose(
    preds_per_seed: &[PredictionMatrix],
    labels: &PredictionMatrix,
    per_sample: bool,
) -> Result<BiasVarianceReport> {
    let s = preds_per_seed.len();
    if s < 2 {
        return Err(Error::contract(format!(
            "decomposition needs at least 2 runs, got {s}"
        )));
    }
    for p in preds_per_seed {
        if p.rows != labels.rows || p.classes != labels.classes {
            return Err(Error::Dimension {
                op: "bias_variance_decompose",
                shapes: vec![vec![p.rows, p.classes], vec![labels.rows, labels.classes]],
            });
        }
    }
    let (rows, classes) = (labels.rows, labels.classes);
    if rows == 0 {
        return Err(Error::contract("decomposition needs at least one sample"));
    }
    let mut terms = Vec::with_capacity(rows);
    let mut mean = vec![0.0; classes];
    for m in 0..rows {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for p in preds_per_seed {
            for (acc, v) in mean.iter_mut().zip(p.row(m)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= s as f64);
        let y = labels.row(m);
        let bias_sq: f64 = y.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
        let (mut variance, mut mse) = (0.0, 0.0);
        for p in preds_per_seed {
            for ((v, mu), t) in p.row(m).iter().zip(&mean).zip(y) {
                variance += (v - mu).powi(2);
                mse += (t - v).powi(2);
            }
        }
        terms.push(SampleTerms {
            bias_sq,
            variance: variance / s as f64,
            mse: mse / s as f64,
        });
    }
    let avg = |f: fn(&SampleTerms) -> f64| terms.iter().map(f).sum::<f64>() / rows as f64;
    Ok(BiasVarianceReport {
        bias_sq: avg(|t| t.bias_sq),
        variance: avg(|t| t.variance),
        mse: avg(|t| t.mse),
        s,
        per_sample: per_sample.then_some(terms),
    })
}
