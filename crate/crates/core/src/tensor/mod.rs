//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tensor`] is a plain value. It becomes part of a differentiation graph
//! when it is registered on a [`Tape`] with [`Tape::leaf`] or produced by a tape
//! operation that consumed at least one tracked input. [`Tensor::detach`] drops
//! that link, so consumers of the detached copy never send gradient back to
//! its producers.
//!
//! ```
//! use damel::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(&x, &x).unwrap();
//! let loss = tape.sum(&sq).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.values(&x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod norm;
mod tape;

pub use norm::{MomentAccumulator, NormMode, NormStatsState};
pub use tape::{Gradients, OpKind, Tape};

use crate::error::{Error, Result};

/// Identifies a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape must be non-empty with positive sizes, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                shapes: vec![shape, vec![values.len()]],
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// # Panics
    /// If `values` is empty.
    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empty vector tensor");
        Tensor::from_parts(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            grad: None,
            node: None,
        }
    }

    pub(crate) fn with_node(mut self, node: Option<NodeId>) -> Self {
        self.node = node;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the stored values. Only meaningful for untracked
    /// tensors; the tape keeps its own copies of anything it needs.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "set_grad",
                shapes: vec![self.shape.clone(), vec![grad.len()]],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Same values, no tape linkage, no gradient slot.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.values.clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.values[r * cols..(r + 1) * cols]
    }
}
