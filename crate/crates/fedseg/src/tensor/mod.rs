//! Dense n-d arrays with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus a flat, row-major f32 buffer.
//! Differentiable computation happens on a [`Tape`]: leaves are inserted,
//! ops are recorded, and [`Tape::backward`] fills gradients in one reverse
//! sweep. All kernels use fixed accumulation order, so results are
//! bitwise reproducible for identical inputs.

mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Row-major n-d array of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Filled by training code after a backward pass; `None` otherwise.
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// He-uniform initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let limit = (6.0 / fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
    }
}

pub(crate) fn check_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}
