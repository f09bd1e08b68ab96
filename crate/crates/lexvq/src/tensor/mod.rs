//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! Everything downstream (layers, quantization, the training loop) is
//! expressed in the operations of [`Tape`]. Tensors outside a tape are plain
//! immutable values; a tape is rebuilt for every forward pass.

mod matmul;
mod sparse;
mod tape;

pub use matmul::matmul_into;
pub use sparse::SparseMat;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// A dense n-dimensional array of f64 in row-major order.
///
/// `grad` is populated by harvesting from a tape after `backward`; it is
/// `None` until then and cleared by the optimizer after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(Error::Invalid(format!(
                "shape {:?} does not describe a buffer of {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builder-style toggle; parameters are created with this set.
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating zeros first if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (acc, &gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks matrices vertically; all must share the column count.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = match parts.first() {
            Some(t) if t.shape.len() == 2 => t.shape[1],
            _ => return Err(Error::Invalid("vstack needs 2-d tensors".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            if t.shape.len() != 2 || t.shape[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "vstack",
                    left: vec![rows, cols],
                    right: t.shape.clone(),
                });
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new(data, &[rows, cols])
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() needs a 2-d tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Bitwise equality, used by determinism and resume tests.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
