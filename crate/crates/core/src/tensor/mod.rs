//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is an immutable value plus an optional handle into a
//! [`Tape`]. Tensors without a handle are constants: no operation ever
//! routes gradient into them. The tape records an operation only when
//! recording is switched on *and* at least one input carries a handle, so
//! frozen weights flowing through a recorded graph stay constants and a
//! forward pass run with recording off leaves no trace at all.

mod gemm;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub(crate) use ops::attention_probs as ops_attention_probs;
pub use ops::{PoolMode, PoolPlan};
pub use tape::{Grads, NodeId, Tape};

/// Dense row-major array of `f64` with an optional tape handle.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<f64>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
            node: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_parts(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// True when no gradient can reach this tensor.
    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// Same values, no tape handle. Gradient flow stops here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &preview)
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; tape handles are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}


#[cfg(test)]
mod op_tests;
