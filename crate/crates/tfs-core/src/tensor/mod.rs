//! Dense tensors, a reverse-mode autodiff tape, Adam, and gradient checking.
//!
//! Values are f64 end to end; parameters are quantized to f32 precision at
//! every checkpoint boundary so the on-disk format stays 32-bit while
//! in-memory math keeps enough headroom for finite-difference verification.
//! Every operation validates shapes and rejects non-finite outputs instead of
//! letting NaN/inf propagate.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod optim;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use optim::{adam_step, AdamConfig, AdamState};

use crate::error::{Result, TfsError};

/// A dense row-major tensor with an optional gradient buffer.
///
/// `Tensor` is plain storage: parameters, checkpoint payloads, and gradient
/// check inputs. Computation happens on a [`Graph`], which copies leaf data in
/// and hands gradients back out.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating that `data` fills `shape` exactly and is
    /// finite throughout.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(TfsError::Dimension(format!(
                "tensor shape {shape:?} has no elements"
            )));
        }
        if data.len() != expect {
            return Err(TfsError::Dimension(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TfsError::Numeric("tensor data contains NaN/inf".into()));
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; it must match the data length.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TfsError::Dimension(format!(
                "gradient length {} != data length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rounds every value to the nearest f32. Applied at checkpoint
    /// boundaries so persisted parameters round-trip bit-exactly through the
    /// 32-bit on-disk format.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Host-side softmax over a slice, used where a probability vector is needed
/// as plain data (pseudo-labeling, tests). Matches the graph op's numerics:
/// max-subtraction then normalized exponentials.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
