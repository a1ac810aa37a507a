//! Randomly composed networks and a central finite-difference oracle.

#![allow(dead_code)]

use damel::tensor::{NormStatsState, Tape, Tensor};
use damel::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
enum Post {
    Relu,
    L2Rows,
    BatchNorm {
        scale: usize,
        shift: usize,
    },
    MulRow(usize),
    /// `concat(h, relu(h))`, doubling the width.
    ConcatRelu,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: usize,
    bias: usize,
    post: Post,
}

#[derive(Clone, Debug)]
enum Head {
    /// Cosine logits then cross-entropy, optionally class-weighted.
    CosineCe {
        weight: usize,
        alpha: f64,
        class_weights: Option<Vec<f64>>,
    },
    /// Plain logits then cross-entropy.
    Ce {
        class_weights: Option<Vec<f64>>,
    },
    MeanSquare,
    Sum,
}

/// A small network over a fixed input batch; every parameter is checked.
#[derive(Clone, Debug)]
pub struct RandomNet {
    input: Tensor,
    labels: Vec<usize>,
    layers: Vec<Layer>,
    head: Head,
    pub params: Vec<Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

impl RandomNet {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rng.random_range(3..6);
        let mut width = rng.random_range(2..5);
        let input =
            Tensor::matrix(batch, width, uniform(&mut rng, batch * width, -1.5, 1.5)).unwrap();
        let depth = rng.random_range(2..=4);
        let mut params = Vec::new();
        let push = |t: Tensor, params: &mut Vec<Tensor>| {
            params.push(t);
            params.len() - 1
        };
        let mut layers = Vec::new();
        for _ in 0..depth {
            let out = rng.random_range(2..5);
            let weight = push(
                Tensor::matrix(width, out, uniform(&mut rng, width * out, -1.0, 1.0)).unwrap(),
                &mut params,
            );
            let bias = push(
                Tensor::vector(uniform(&mut rng, out, -0.5, 0.5)),
                &mut params,
            );
            let post = match rng.random_range(0..5) {
                0 => Post::Relu,
                1 => Post::L2Rows,
                2 => Post::BatchNorm {
                    scale: push(
                        Tensor::vector(uniform(&mut rng, out, 0.5, 1.5)),
                        &mut params,
                    ),
                    shift: push(
                        Tensor::vector(uniform(&mut rng, out, -0.5, 0.5)),
                        &mut params,
                    ),
                },
                3 => Post::MulRow(push(
                    Tensor::vector(uniform(&mut rng, out, -1.5, 1.5)),
                    &mut params,
                )),
                _ => Post::ConcatRelu,
            };
            width = if matches!(post, Post::ConcatRelu) {
                2 * out
            } else {
                out
            };
            layers.push(Layer { weight, bias, post });
        }
        let classes = width;
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let weighted = rng.random_bool(0.5);
        let class_weights = weighted.then(|| uniform(&mut rng, classes, 0.2, 2.0));
        let head = match rng.random_range(0..4) {
            0 => {
                let cls = rng.random_range(2..5);
                let weight = push(
                    Tensor::matrix(width, cls, uniform(&mut rng, width * cls, -1.0, 1.0)).unwrap(),
                    &mut params,
                );
                let cls_weights = class_weights.map(|_| uniform(&mut rng, cls, 0.2, 2.0));
                return RandomNet {
                    labels: labels.iter().map(|&y| y % cls).collect(),
                    input,
                    layers,
                    head: Head::CosineCe {
                        weight,
                        alpha: rng.random_range(2.0..16.0),
                        class_weights: cls_weights,
                    },
                    params,
                };
            }
            1 => Head::Ce { class_weights },
            2 => Head::MeanSquare,
            _ => Head::Sum,
        };
        RandomNet {
            input,
            labels,
            layers,
            head,
            params,
        }
    }

    /// True if some layer uses batch normalization.
    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.post, Post::BatchNorm { .. }))
    }

    /// Ops used, for coverage accounting.
    pub fn op_names(&self) -> Vec<&'static str> {
        let mut names = vec!["matmul", "add"];
        for l in &self.layers {
            names.push(match l.post {
                Post::Relu => "relu",
                Post::L2Rows => "l2_normalize",
                Post::BatchNorm { .. } => "batch_norm",
                Post::MulRow(_) => "mul",
                Post::ConcatRelu => "concat",
            });
        }
        names.push(match self.head {
            Head::CosineCe {
                class_weights: Some(_),
                ..
            }
            | Head::Ce {
                class_weights: Some(_),
            } => "weighted_cross_entropy",
            Head::CosineCe { .. } | Head::Ce { .. } => "cross_entropy",
            Head::MeanSquare => "mean",
            Head::Sum => "sum",
        });
        names
    }

    pub fn loss(&self, tape: &Tape, params: &[Tensor]) -> Result<Tensor> {
        let mut h = self.input.clone();
        for layer in &self.layers {
            h = tape.matmul(&h, &params[layer.weight])?;
            h = tape.add(&h, &params[layer.bias])?;
            h = match &layer.post {
                Post::Relu => tape.relu(&h)?,
                Post::L2Rows => tape.l2_normalize(&h, 1, 1e-12)?,
                Post::BatchNorm { scale, shift } => {
                    let mut state = NormStatsState::new(h.shape()[1]);
                    tape.batch_norm(&h, &mut state, &params[*scale], &params[*shift], 0.1)?
                }
                Post::MulRow(m) => tape.mul(&h, &params[*m])?,
                Post::ConcatRelu => {
                    let r = tape.relu(&h)?;
                    tape.concat_last_axis(&[&h, &r])?
                }
            };
        }
        match &self.head {
            Head::CosineCe {
                weight,
                alpha,
                class_weights,
            } => {
                let z = tape.l2_normalize(&h, 1, 1e-12)?;
                let w = tape.l2_normalize(&params[*weight], 0, 1e-12)?;
                let logits = tape.scale(&tape.matmul(&z, &w)?, *alpha)?;
                tape.softmax_cross_entropy(&logits, &self.labels, class_weights.as_deref())
            }
            Head::Ce { class_weights } => {
                tape.softmax_cross_entropy(&h, &self.labels, class_weights.as_deref())
            }
            Head::MeanSquare => tape.mean(&tape.mul(&h, &h)?),
            Head::Sum => tape.sum(&h),
        }
    }

    pub fn analytic_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let bound: Vec<Tensor> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let loss = self.loss(&tape, &bound)?;
        let grads = tape.backward(&loss)?;
        Ok(bound.iter().map(|p| grads.values_or_zeros(p)).collect())
    }

    pub fn value_at(&self, params: &[Tensor]) -> Result<f64> {
        let tape = Tape::new();
        Ok(self.loss(&tape, params)?.item().unwrap())
    }
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub entries: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every parameter entry.
/// An entry passes when `|a − n| ≤ rel·max(|a|, |n|)` or `|a − n| ≤ abs_floor`.
pub fn check_net(net: &RandomNet, h: f64, rel: f64, abs_floor: f64) -> Result<GradCheck> {
    let analytic = net.analytic_gradients()?;
    let mut report = GradCheck::default();
    let mut params = net.params.clone();
    for (p, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = params[p].values()[i];
            params[p].values_mut()[i] = orig + h;
            let up = net.value_at(&params)?;
            params[p].values_mut()[i] = orig - h;
            let down = net.value_at(&params)?;
            params[p].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.entries += 1;
            if diff > abs_floor {
                report.worst_rel = report.worst_rel.max(diff / scale);
            }
            if diff > abs_floor && diff > rel * scale {
                report.failures.push(format!(
                    "param {p}[{i}]: analytic {a:e}, numeric {numeric:e}"
                ));
            }
        }
    }
    Ok(report)
}
