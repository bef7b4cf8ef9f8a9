//! Minimal reverse-mode automatic differentiation over dense row-major
//! arrays. The primitive set is fixed to exactly what the Transformer
//! needs: matmul, add, multiply, scale, relu, softmax, layer_norm,
//! embedding gather, dropout, concat/split/reshape/transpose,
//! reduce-sum/mean, log, exp, and label-smoothed cross-entropy.
//! Everything else in the crate is composed from these.

pub mod gradcheck;
pub mod kernels;
mod tape;
#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, TensorRef};

use std::sync::Arc;

use kernels::{fmt_shape, numel};

/// Storage precision for tensor values and gradients.
///
/// `Single` keeps every stored element exactly representable as an f32
/// (kernels still accumulate in f64), so checkpoints round-trip through
/// their 32-bit on-disk payload bit-exactly. `Double` is full f64 and is
/// what the finite-difference gradient checks run under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    pub fn quantize_slice(self, xs: &mut [f64]) {
        if self == Precision::Single {
            for x in xs.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Immutable dense tensor value. Cheap to clone; the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {} implies {} elements, got {}",
            fmt_shape(&shape),
            numel(&shape),
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on non-scalar tensor of shape {}",
            fmt_shape(&self.shape)
        );
        self.data[0]
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }
}
