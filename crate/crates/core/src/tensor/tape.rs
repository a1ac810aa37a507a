use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::norm::{NormMode, NormStatsState};
use super::{NodeId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// The closed set of generic elementwise/structural ops reachable through
/// [`Tape::forward_op`]. Normalization and the losses have dedicated methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Relu,
    ConcatLastAxis,
    Mean,
    Sum,
}

/// What backward needs from the forward pass of each node.
#[derive(Debug)]
enum Saved {
    Leaf,
    MatMul {
        a: Vec<f64>,
        b: Vec<f64>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        rhs_broadcast: bool,
    },
    Mul {
        a: Vec<f64>,
        b: Vec<f64>,
        rhs_broadcast: bool,
    },
    Relu {
        active: Vec<bool>,
    },
    Concat {
        widths: Vec<usize>,
    },
    Mean {
        n: usize,
    },
    Sum {
        n: usize,
    },
    Scale {
        factor: f64,
    },
    L2Normalize {
        y: Vec<f64>,
        divisors: Vec<f64>,
        eps: f64,
        len: usize,
        inner: usize,
    },
    SoftmaxCrossEntropy {
        probs: Vec<f64>,
        labels: Vec<usize>,
        sample_weights: Vec<f64>,
        classes: usize,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        gamma: Vec<f64>,
        features: usize,
        train: bool,
    },
}

#[derive(Debug)]
struct Node {
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
    saved: Saved,
}

/// Append-only record of tracked operations, in execution order.
///
/// Tapes are single-threaded (`!Sync`) and meant to be rebuilt for every
/// forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that it depends on.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn values(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node()?;
        self.by_node(id)
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[f64]> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index)?.as_deref()
    }

    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let g = self.values(t)?;
        Some(Tensor::from_parts(t.shape().to_vec(), g.to_vec()))
    }

    /// Gradient for `t`, or zeros when `t` does not influence the loss.
    pub fn values_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.values(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    /// Every `(node, gradient)` pair reached by backward.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Tensor)> + '_ {
        self.grads.iter().enumerate().filter_map(move |(i, g)| {
            g.as_ref().map(|g| {
                (
                    NodeId {
                        tape: self.tape,
                        index: i,
                    },
                    Tensor::from_parts(self.shapes[i].clone(), g.clone()),
                )
            })
        })
    }

    /// Copies gradients into the `grad` slot of each tensor.
    pub fn attach(&self, tensors: &mut [Tensor]) {
        for t in tensors {
            if let Some(g) = self.values(t) {
                t.grad = Some(g.to_vec());
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g: m×n`, `b: k×n`.
fn matmul_rhs_t(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` for `a: m×k`, `g: m×n`.
fn matmul_lhs_t(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

fn column_sums(g: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for row in g.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Whether `b` combines with `a` as an equal shape (false) or as a row vector
/// repeated over the leading axes of `a` (true).
fn binary_layout(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    if a.shape().len() >= 2 && b.shape().len() == 1 && a.shape().last() == b.shape().last() {
        return Ok(true);
    }
    Err(Error::Dimension {
        op,
        shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a copy of `t` as a differentiable leaf.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Vec::new(), t.shape().to_vec(), Saved::Leaf);
        t.detach().with_node(Some(id))
    }

    pub fn detach(&self, t: &Tensor) -> Tensor {
        t.detach()
    }

    fn push(&self, inputs: Vec<Option<usize>>, shape: Vec<usize>, saved: Saved) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs,
            shape,
            saved,
        });
        NodeId {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn input_index(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(id) if id.tape == self.id => Ok(Some(id.index)),
            Some(_) => Err(Error::contract("tensor belongs to a different tape")),
        }
    }

    /// Record a node only when some input is tracked, otherwise return a
    /// plain value.
    fn record(
        &self,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        values: Vec<f64>,
        saved: impl FnOnce() -> Saved,
    ) -> Result<Tensor> {
        let idx = inputs
            .iter()
            .map(|t| self.input_index(t))
            .collect::<Result<Vec<_>>>()?;
        let node = if idx.iter().any(Option::is_some) {
            Some(self.push(idx, shape.clone(), saved()))
        } else {
            None
        };
        Ok(Tensor::from_parts(shape, values).with_node(node))
    }

    /// Dispatch one of the generic ops by kind.
    pub fn forward_op(&self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "{kind:?} takes {n} input(s), got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::ConcatLastAxis => self.concat_last_axis(inputs),
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
        }
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let dims = (a.dims2(), b.dims2());
        let ((m, k), (k2, n)) = match dims {
            (Some(da), Some(db)) if da.1 == db.0 => (da, db),
            _ => {
                return Err(Error::Dimension {
                    op: "matmul",
                    shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
                })
            }
        };
        debug_assert_eq!(k, k2);
        let out = matmul_raw(a.values(), b.values(), m, k, n);
        self.record(&[a, b], vec![m, n], out, || Saved::MatMul {
            a: a.values().to_vec(),
            b: b.values().to_vec(),
            m,
            k,
            n,
        })
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of `a`.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let rhs_broadcast = binary_layout("add", a, b)?;
        let w = b.numel();
        let out = a
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.values()[i % w])
            .collect();
        self.record(&[a, b], a.shape().to_vec(), out, || Saved::Add {
            rhs_broadcast,
        })
    }

    /// Elementwise product, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let rhs_broadcast = binary_layout("mul", a, b)?;
        let w = b.numel();
        let out = a
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x * b.values()[i % w])
            .collect();
        self.record(&[a, b], a.shape().to_vec(), out, || Saved::Mul {
            a: a.values().to_vec(),
            b: b.values().to_vec(),
            rhs_broadcast,
        })
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|&v| v.max(0.0)).collect();
        self.record(&[x], x.shape().to_vec(), out, || Saved::Relu {
            active: x.values().iter().map(|&v| v > 0.0).collect(),
        })
    }

    pub fn concat_last_axis(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat_last_axis needs at least one input"))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        let mismatch = || Error::Dimension {
            op: "concat_last_axis",
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        };
        for t in inputs {
            if t.shape().len() != first.shape().len() || &t.shape()[..lead.len()] != lead {
                return Err(mismatch());
            }
        }
        let widths: Vec<usize> = inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (t, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&t.values()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.record(inputs, shape, out, || Saved::Concat { widths })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        let v = x.values().iter().sum::<f64>() / n as f64;
        self.record(&[x], vec![1], vec![v], || Saved::Mean { n })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        let v = x.values().iter().sum::<f64>();
        self.record(&[x], vec![1], vec![v], || Saved::Sum { n })
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let out = x.values().iter().map(|v| v * factor).collect();
        self.record(&[x], x.shape().to_vec(), out, || Saved::Scale { factor })
    }

    /// Divide every slice along `axis` by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(&self, x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::contract(format!(
                "l2_normalize eps must be > 0, got {eps}"
            )));
        }
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = x.values();
        let mut y = vec![0.0; xs.len()];
        let mut divisors = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let norm = (0..len).map(|i| xs[at(i)] * xs[at(i)]).sum::<f64>().sqrt();
                let d = norm.max(eps);
                divisors[o * inner + j] = if norm >= eps { norm } else { -eps };
                for i in 0..len {
                    y[at(i)] = xs[at(i)] / d;
                }
            }
        }
        let saved_y = y.clone();
        self.record(&[x], shape.to_vec(), y, || Saved::L2Normalize {
            y: saved_y,
            divisors,
            eps,
            len,
            inner,
        })
    }

    /// Mean over the batch of `weight[y_b] · (−log softmax(logits_b)[y_b])`.
    /// Without `class_weights` every weight is 1.
    pub fn softmax_cross_entropy(
        &self,
        logits: &Tensor,
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Tensor> {
        let (batch, classes) = logits.dims2().ok_or_else(|| Error::Dimension {
            op: "softmax_cross_entropy",
            shapes: vec![logits.shape().to_vec()],
        })?;
        if labels.len() != batch {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                shapes: vec![logits.shape().to_vec(), vec![labels.len()]],
            });
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(Error::Dimension {
                    op: "softmax_cross_entropy",
                    shapes: vec![logits.shape().to_vec(), vec![w.len()]],
                });
            }
            if let Some(bad) = w.iter().find(|&&v| v.is_nan() || v <= 0.0) {
                return Err(Error::contract(format!(
                    "class weights must be > 0, got {bad}"
                )));
            }
        }
        let mut probs = vec![0.0; batch * classes];
        let mut sample_weights = Vec::with_capacity(batch);
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Index {
                    what: "label",
                    index: y,
                    bound: classes,
                });
            }
            let row = logits.row(b);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp_sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + exp_sum.ln();
            for (p, v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            let w = class_weights.map_or(1.0, |w| w[y]);
            sample_weights.push(w);
            total += w * (log_z - row[y]);
        }
        let loss = total / batch as f64;
        self.record(&[logits], vec![1], vec![loss], || {
            Saved::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
                sample_weights,
                classes,
            }
        })
    }

    /// Per-feature batch normalization of a `B×F` input, followed by the
    /// affine `scale`/`shift`. Train mode normalizes by batch statistics and
    /// folds them into `state` with `momentum`; eval mode uses the running
    /// statistics only.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        state: &mut NormStatsState,
        scale: &Tensor,
        shift: &Tensor,
        momentum: f64,
    ) -> Result<Tensor> {
        let (rows, features) = x.dims2().ok_or_else(|| Error::Dimension {
            op: "batch_norm",
            shapes: vec![x.shape().to_vec()],
        })?;
        if scale.shape() != [features]
            || shift.shape() != [features]
            || state.features() != features
        {
            return Err(Error::Dimension {
                op: "batch_norm",
                shapes: vec![
                    x.shape().to_vec(),
                    scale.shape().to_vec(),
                    shift.shape().to_vec(),
                    vec![state.features()],
                ],
            });
        }
        let train = state.mode == NormMode::Train;
        let (mean, var) = if train {
            if rows < 2 {
                return Err(Error::contract(
                    "batch_norm in train mode needs at least 2 rows",
                ));
            }
            let mut acc = super::MomentAccumulator::new(features);
            acc.push_rows(x.values());
            let var = acc.population_variance();
            let mean = acc.mean().to_vec();
            state.blend(&mean, &var, momentum);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = vec![0.0; rows * features];
        let mut out = vec![0.0; rows * features];
        for r in 0..rows {
            for f in 0..features {
                let i = r * features + f;
                xhat[i] = (x.values()[i] - mean[f]) * inv_std[f];
                out[i] = scale.values()[f] * xhat[i] + shift.values()[f];
            }
        }
        self.record(&[x, scale, shift], vec![rows, features], out, || {
            Saved::BatchNorm {
                xhat,
                inv_std,
                gamma: scale.values().to_vec(),
                features,
                train,
            }
        })
    }

    /// Reverse sweep from a scalar tracked tensor.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = self
            .input_index(loss)?
            .ok_or_else(|| Error::contract("backward on a tensor that is not on the tape"))?;
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut done: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        pending[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &nodes[i];
            let contributions = node_backward(node, &g);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let (Some(j), Some(c)) = (input, contrib) else {
                    continue;
                };
                match &mut pending[*j] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
            done[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads: done,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

/// Gradient contribution for each input of `node`, given the gradient `g`
/// flowing into its output. Untracked inputs get `None`.
fn node_backward(node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want = |k: usize| node.inputs[k].is_some();
    match &node.saved {
        Saved::Leaf => Vec::new(),
        Saved::MatMul { a, b, m, k, n } => vec![
            want(0).then(|| matmul_rhs_t(g, b, *m, *k, *n)),
            want(1).then(|| matmul_lhs_t(a, g, *m, *k, *n)),
        ],
        Saved::Add { rhs_broadcast } => {
            let width = *node.shape.last().unwrap();
            vec![
                want(0).then(|| g.to_vec()),
                want(1).then(|| {
                    if *rhs_broadcast {
                        column_sums(g, width)
                    } else {
                        g.to_vec()
                    }
                }),
            ]
        }
        Saved::Mul {
            a,
            b,
            rhs_broadcast,
        } => {
            let w = b.len();
            vec![
                want(0).then(|| g.iter().enumerate().map(|(i, gv)| gv * b[i % w]).collect()),
                want(1).then(|| {
                    let prod: Vec<f64> = g.iter().zip(a).map(|(gv, av)| gv * av).collect();
                    if *rhs_broadcast {
                        column_sums(&prod, w)
                    } else {
                        prod
                    }
                }),
            ]
        }
        Saved::Relu { active } => vec![want(0).then(|| {
            g.iter()
                .zip(active)
                .map(|(gv, &on)| if on { *gv } else { 0.0 })
                .collect()
        })],
        Saved::Concat { widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(k, &w)| {
                    let start = offset;
                    offset += w;
                    want(k).then(|| {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        out
                    })
                })
                .collect()
        }
        Saved::Mean { n } => vec![want(0).then(|| vec![g[0] / *n as f64; *n])],
        Saved::Sum { n } => vec![want(0).then(|| vec![g[0]; *n])],
        Saved::Scale { factor } => vec![want(0).then(|| g.iter().map(|v| v * factor).collect())],
        Saved::L2Normalize {
            y,
            divisors,
            eps,
            len,
            inner,
        } => vec![want(0).then(|| {
            let (len, inner) = (*len, *inner);
            let mut out = vec![0.0; g.len()];
            for (s, &d) in divisors.iter().enumerate() {
                let (o, j) = (s / inner, s % inner);
                let at = |i: usize| o * len * inner + i * inner + j;
                if d < 0.0 {
                    // Clamped divisor: the map is linear with slope 1/eps.
                    for i in 0..len {
                        out[at(i)] = g[at(i)] / eps;
                    }
                } else {
                    let dot: f64 = (0..len).map(|i| y[at(i)] * g[at(i)]).sum();
                    for i in 0..len {
                        out[at(i)] = (g[at(i)] - y[at(i)] * dot) / d;
                    }
                }
            }
            out
        })],
        Saved::SoftmaxCrossEntropy {
            probs,
            labels,
            sample_weights,
            classes,
        } => vec![want(0).then(|| {
            let batch = labels.len() as f64;
            let mut out = probs.clone();
            for (b, (&y, &w)) in labels.iter().zip(sample_weights).enumerate() {
                let row = &mut out[b * classes..(b + 1) * classes];
                row[y] -= 1.0;
                let c = g[0] * w / batch;
                row.iter_mut().for_each(|v| *v *= c);
            }
            out
        })],
        Saved::BatchNorm {
            xhat,
            inv_std,
            gamma,
            features,
            train,
        } => {
            let f = *features;
            let rows = g.len() / f;
            let gy_xhat: Vec<f64> = g.iter().zip(xhat).map(|(a, b)| a * b).collect();
            let sum_g = column_sums(g, f);
            let sum_g_xhat = column_sums(&gy_xhat, f);
            let dx = want(0).then(|| {
                let mut out = vec![0.0; g.len()];
                for r in 0..rows {
                    for c in 0..f {
                        let i = r * f + c;
                        out[i] = if *train {
                            gamma[c] * inv_std[c] / rows as f64
                                * (rows as f64 * g[i] - sum_g[c] - xhat[i] * sum_g_xhat[c])
                        } else {
                            g[i] * gamma[c] * inv_std[c]
                        };
                    }
                }
                out
            });
            vec![dx, want(1).then_some(sum_g_xhat), want(2).then_some(sum_g)]
        }
    }
}
