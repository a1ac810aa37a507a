//! The multi-expert network.
//!
//! ```text
//! x ─ backbone g ─┬─ h_1 ─ z_1 ─ norm ─ z̄_1 ─ α·cos(z̄_1, w̄_1) ─ expert logits 1
//!                 ├─ …
//!                 └─ h_K ─ z_K ─ norm ─ z̄_K ─ α·cos(z̄_K, w̄_K) ─ expert logits K
//!
//!   [detach(z̄_1), …, detach(z̄_K)] ─ concat ─ norm ─ α·cos(·, w̄) ─ aux logits
//! ```
//!
//! The backbone is two affine+relu layers and each expert block one more,
//! with optional batch normalization after every affine map.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{NormMode, NormStatsState, Tape, Tensor};

/// Floor for the L2 normalization divisor.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Auxiliary classifier over the concatenated expert representations.
    Standard,
    /// One auxiliary classifier per expert, predictions averaged.
    AggregatePredictions,
    /// Auxiliary classifier over the mean of the expert representations.
    AverageRepresentations,
    /// A single expert whose representation is as wide as the concatenation
    /// of `experts` standard ones.
    CapacityControlled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DamelConfig {
    /// Expert count K. For [`Variant::CapacityControlled`] this is the
    /// reference count whose concatenated width the single expert matches.
    pub experts: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub rep_dim: usize,
    pub classes: usize,
    /// Cosine classifier scale α.
    pub alpha: f64,
    pub variant: Variant,
    pub use_norm_layers: bool,
    pub norm_momentum: f64,
}

impl Default for DamelConfig {
    fn default() -> Self {
        DamelConfig {
            experts: 3,
            input_dim: 20,
            hidden_dim: 64,
            rep_dim: 32,
            classes: 10,
            alpha: 16.0,
            variant: Variant::Standard,
            use_norm_layers: true,
            norm_momentum: 0.1,
        }
    }
}

impl DamelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("experts", self.experts),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("rep_dim", self.rep_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be >= 1")));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes must be >= 2"));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::config(format!(
                "model.alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::config("model.norm_momentum must be in [0, 1]"));
        }
        Ok(())
    }

    /// Number of expert blocks actually built.
    pub fn expert_blocks(&self) -> usize {
        match self.variant {
            Variant::CapacityControlled => 1,
            _ => self.experts,
        }
    }

    /// Width of each expert block's representation.
    pub fn block_rep_dim(&self) -> usize {
        match self.variant {
            Variant::CapacityControlled => self.experts * self.rep_dim,
            _ => self.rep_dim,
        }
    }

    /// Input width of each auxiliary classifier head.
    pub fn aux_input_width(&self) -> usize {
        match self.variant {
            Variant::Standard => self.experts * self.rep_dim,
            Variant::CapacityControlled => self.experts * self.rep_dim,
            Variant::AverageRepresentations | Variant::AggregatePredictions => self.rep_dim,
        }
    }

    pub fn aux_heads(&self) -> usize {
        match self.variant {
            Variant::AggregatePredictions => self.experts,
            _ => 1,
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Expert(usize),
    Aux,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormAffine {
    pub scale: Tensor,
    pub shift: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBlock {
    pub layer: Affine,
    pub norm: Option<NormAffine>,
    /// Cosine classifier weights `w_k`, `rep × classes`.
    pub classifier: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub backbone: [Affine; 2],
    pub backbone_norms: Option<[NormAffine; 2]>,
    pub experts: Vec<ExpertBlock>,
    /// Auxiliary classifier weights, one `width × classes` matrix per head.
    pub aux: Vec<Tensor>,
}

impl Params {
    /// Every parameter tensor with its group, in flattening order.
    pub fn tensors(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            out.push((ParamGroup::Backbone, &layer.weight));
            out.push((ParamGroup::Backbone, &layer.bias));
            if let Some(norms) = &self.backbone_norms {
                out.push((ParamGroup::Backbone, &norms[i].scale));
                out.push((ParamGroup::Backbone, &norms[i].shift));
            }
        }
        for (k, e) in self.experts.iter().enumerate() {
            let g = ParamGroup::Expert(k);
            out.push((g, &e.layer.weight));
            out.push((g, &e.layer.bias));
            if let Some(n) = &e.norm {
                out.push((g, &n.scale));
                out.push((g, &n.shift));
            }
            out.push((g, &e.classifier));
        }
        out.extend(self.aux.iter().map(|w| (ParamGroup::Aux, w)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let norms = self.backbone_norms.as_mut().map(|n| n.each_mut());
        let mut norms = norms
            .map(|[a, b]| [Some(a), Some(b)])
            .unwrap_or([None, None]);
        for (layer, norm) in self.backbone.iter_mut().zip(norms.iter_mut()) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(n) = norm.take() {
                out.push(&mut n.scale);
                out.push(&mut n.shift);
            }
        }
        for e in &mut self.experts {
            out.push(&mut e.layer.weight);
            out.push(&mut e.layer.bias);
            if let Some(n) = &mut e.norm {
                out.push(&mut n.scale);
                out.push(&mut n.shift);
            }
            out.push(&mut e.classifier);
        }
        out.extend(self.aux.iter_mut());
        out
    }

    /// Copy with every tensor registered as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Params {
        let mut bound = self.clone();
        for t in bound.tensors_mut() {
            *t = tape.leaf(t);
        }
        bound
    }
}

fn uniform_tensor(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape, values)
}

fn affine(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Affine {
    Affine {
        weight: uniform_tensor(rng, vec![fan_in, fan_out], fan_in),
        bias: uniform_tensor(rng, vec![fan_out], fan_in),
    }
}

fn norm_affine(width: usize) -> NormAffine {
    NormAffine {
        scale: Tensor::from_parts(vec![width], vec![1.0; width]),
        shift: Tensor::from_parts(vec![width], vec![0.0; width]),
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `α · z̄_k · w̄_k`, one `B × L` tensor per expert.
    pub expert_logits: Vec<Tensor>,
    /// L2-normalized expert representations `z̄_k`, `B × rep` each.
    pub normalized_reps: Vec<Tensor>,
    /// One `B × L` tensor per auxiliary head. Computed from detached copies of
    /// `normalized_reps`, so no gradient from them reaches the experts.
    pub aux_logits: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DamelModel {
    cfg: DamelConfig,
    pub params: Params,
    /// Backbone norm layers first, then one per expert block.
    pub norm_states: Vec<NormStatsState>,
}

impl DamelModel {
    /// Fan-in scaled uniform initialization. The backbone, each expert block
    /// and each auxiliary head draw from their own `(seed, index)` stream.
    pub fn init(cfg: &DamelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d_in, h, r, l) = (
            cfg.input_dim,
            cfg.hidden_dim,
            cfg.block_rep_dim(),
            cfg.classes,
        );
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let backbone = [affine(&mut rng, d_in, h), affine(&mut rng, h, h)];
        let experts = (0..cfg.expert_blocks())
            .map(|k| {
                let mut rng = rng::stream(seed, Purpose::Init, 1 + k as u64);
                ExpertBlock {
                    layer: affine(&mut rng, h, r),
                    norm: cfg.use_norm_layers.then(|| norm_affine(r)),
                    classifier: uniform_tensor(&mut rng, vec![r, l], r),
                }
            })
            .collect();
        let width = cfg.aux_input_width();
        let aux = (0..cfg.aux_heads())
            .map(|j| {
                let mut rng = rng::stream(seed, Purpose::Init, 1_000_000 + j as u64);
                uniform_tensor(&mut rng, vec![width, l], width)
            })
            .collect();
        let params = Params {
            backbone,
            backbone_norms: cfg
                .use_norm_layers
                .then(|| [norm_affine(h), norm_affine(h)]),
            experts,
            aux,
        };
        let norm_states = if cfg.use_norm_layers {
            let mut s = vec![NormStatsState::new(h), NormStatsState::new(h)];
            s.extend((0..cfg.expert_blocks()).map(|_| NormStatsState::new(r)));
            s
        } else {
            Vec::new()
        };
        Ok(DamelModel {
            cfg: cfg.clone(),
            params,
            norm_states,
        })
    }

    pub fn config(&self) -> &DamelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameters (including norm scale/shift, excluding running
    /// statistics) as one vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.params.tensors() {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "parameter vector has {} entries, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.params.tensors_mut() {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flat index ranges of every parameter tensor with its group.
    pub fn segments(&self) -> Vec<(ParamGroup, Range<usize>)> {
        let mut offset = 0;
        self.params
            .tensors()
            .into_iter()
            .map(|(g, t)| {
                let r = offset..offset + t.numel();
                offset = r.end;
                (g, r)
            })
            .collect()
    }

    /// Gradients for the tensors of `bound`, flattened in parameter order,
    /// zero where the loss does not reach.
    pub fn flat_grads(bound: &Params, grads: &crate::tensor::Gradients) -> Vec<f64> {
        bound
            .tensors()
            .into_iter()
            .flat_map(|(_, t)| grads.values_or_zeros(t))
            .collect()
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        for s in &mut self.norm_states {
            s.mode = mode;
        }
    }

    pub fn has_norm_layers(&self) -> bool {
        !self.norm_states.is_empty()
    }

    /// Backbone and expert blocks up to the normalized representations and
    /// the expert cosine logits. `params` defaults to the model's own
    /// (untracked) parameters.
    pub fn forward_experts(
        &mut self,
        tape: &Tape,
        params: Option<&Params>,
        x: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        self.run_experts(tape, params, x, None)
    }

    /// Inputs of every norm layer (in `norm_states` order) for `x`, computed
    /// with running statistics.
    pub fn pre_norm_activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut scratch = self.clone();
        scratch.set_norm_mode(NormMode::Eval);
        let mut captured = Vec::new();
        scratch.run_experts(&Tape::new(), None, x, Some(&mut captured))?;
        Ok(captured)
    }

    fn run_experts(
        &mut self,
        tape: &Tape,
        params: Option<&Params>,
        x: &Tensor,
        mut capture: Option<&mut Vec<Tensor>>,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let cfg = &self.cfg;
        match x.dims2() {
            Some((_, w)) if w == cfg.input_dim => {}
            _ => {
                return Err(Error::Dimension {
                    op: "forward_experts",
                    shapes: vec![x.shape().to_vec(), vec![cfg.input_dim]],
                })
            }
        }
        let p = params.unwrap_or(&self.params);
        let momentum = cfg.norm_momentum;
        let mut layer = |input: &Tensor,
                         a: &Affine,
                         norm: Option<&NormAffine>,
                         state: Option<&mut NormStatsState>|
         -> Result<Tensor> {
            let h = tape.add(&tape.matmul(input, &a.weight)?, &a.bias)?;
            let h = match (norm, state) {
                (Some(n), Some(s)) => {
                    if let Some(c) = capture.as_mut() {
                        c.push(h.detach());
                    }
                    tape.batch_norm(&h, s, &n.scale, &n.shift, momentum)?
                }
                _ => h,
            };
            tape.relu(&h)
        };
        let mut states = self.norm_states.iter_mut();
        let norms = p.backbone_norms.as_ref();
        let h1 = layer(x, &p.backbone[0], norms.map(|n| &n[0]), states.next())?;
        let h2 = layer(&h1, &p.backbone[1], norms.map(|n| &n[1]), states.next())?;

        let mut logits = Vec::with_capacity(p.experts.len());
        let mut reps = Vec::with_capacity(p.experts.len());
        for e in &p.experts {
            let z = layer(&h2, &e.layer, e.norm.as_ref(), states.next())?;
            let z_bar = tape.l2_normalize(&z, 1, NORMALIZE_EPS)?;
            logits.push(cosine_logits(tape, &z_bar, &e.classifier, cfg.alpha)?);
            reps.push(z_bar);
        }
        Ok((logits, reps))
    }

    /// Auxiliary logits from detached copies of the normalized
    /// representations.
    pub fn forward_auxiliary(
        &self,
        tape: &Tape,
        params: Option<&Params>,
        normalized_reps: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        let p = params.unwrap_or(&self.params);
        let cfg = &self.cfg;
        if normalized_reps.len() != cfg.expert_blocks() || p.aux.len() != cfg.aux_heads() {
            return Err(Error::config(format!(
                "variant {:?} expects {} representations and {} aux heads, got {} and {}",
                cfg.variant,
                cfg.expert_blocks(),
                cfg.aux_heads(),
                normalized_reps.len(),
                p.aux.len()
            )));
        }
        for w in &p.aux {
            if w.shape() != [cfg.aux_input_width(), cfg.classes] {
                return Err(Error::config(format!(
                    "aux classifier shape {:?} does not fit variant {:?}",
                    w.shape(),
                    cfg.variant
                )));
            }
        }
        let detached: Vec<Tensor> = normalized_reps.iter().map(Tensor::detach).collect();
        match cfg.variant {
            Variant::Standard | Variant::CapacityControlled => {
                let refs: Vec<&Tensor> = detached.iter().collect();
                let joined = tape.concat_last_axis(&refs)?;
                let joined = tape.l2_normalize(&joined, 1, NORMALIZE_EPS)?;
                Ok(vec![cosine_logits(tape, &joined, &p.aux[0], cfg.alpha)?])
            }
            Variant::AverageRepresentations => {
                let mut acc = detached[0].clone();
                for z in &detached[1..] {
                    acc = tape.add(&acc, z)?;
                }
                let mean = tape.scale(&acc, 1.0 / detached.len() as f64)?;
                let mean = tape.l2_normalize(&mean, 1, NORMALIZE_EPS)?;
                Ok(vec![cosine_logits(tape, &mean, &p.aux[0], cfg.alpha)?])
            }
            Variant::AggregatePredictions => detached
                .iter()
                .zip(&p.aux)
                .map(|(z, w)| cosine_logits(tape, z, w, cfg.alpha))
                .collect(),
        }
    }

    pub fn forward(
        &mut self,
        tape: &Tape,
        params: Option<&Params>,
        x: &Tensor,
    ) -> Result<ForwardOutput> {
        let (expert_logits, normalized_reps) = self.forward_experts(tape, params, x)?;
        let aux_logits = self.forward_auxiliary(tape, params, &normalized_reps)?;
        Ok(ForwardOutput {
            expert_logits,
            normalized_reps,
            aux_logits,
        })
    }

    /// Scores whose row-wise argmax is the prediction: auxiliary logits, or
    /// for [`Variant::AggregatePredictions`] the mean of the per-head softmax.
    /// Uses running statistics for normalization and leaves them untouched.
    pub fn prediction_scores(&self, x: &Tensor) -> Result<Tensor> {
        let mut scratch = DamelModel {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            norm_states: self.norm_states.clone(),
        };
        scratch.set_norm_mode(NormMode::Eval);
        let tape = Tape::new();
        let out = scratch.forward(&tape, None, x)?;
        if self.cfg.variant != Variant::AggregatePredictions {
            return Ok(out.aux_logits.into_iter().next().unwrap());
        }
        let heads = out.aux_logits.len() as f64;
        let shape = out.aux_logits[0].shape().to_vec();
        let classes = shape[1];
        let mut mean = vec![0.0; out.aux_logits[0].numel()];
        for logits in &out.aux_logits {
            for (dst, row) in mean
                .chunks_exact_mut(classes)
                .zip(logits.values().chunks_exact(classes))
            {
                for (d, p) in dst.iter_mut().zip(softmax(row)) {
                    *d += p / heads;
                }
            }
        }
        Ok(Tensor::from_parts(shape, mean))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let scores = self.prediction_scores(x)?;
        let (rows, _) = scores.dims2().unwrap();
        Ok((0..rows).map(|r| argmax(scores.row(r))).collect())
    }
}

fn cosine_logits(tape: &Tape, z_bar: &Tensor, weight: &Tensor, alpha: f64) -> Result<Tensor> {
    let w_bar = tape.l2_normalize(weight, 0, NORMALIZE_EPS)?;
    tape.scale(&tape.matmul(z_bar, &w_bar)?, alpha)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
