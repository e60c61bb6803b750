//! Dense tensors and the reverse-mode tape used for all gradient computations.
//!
//! Everything is row-major, explicitly shaped and stored at 64-bit precision.
//! The only broadcasting is bias addition.

mod kernels;
mod scalar;
mod tape;

pub use kernels::{conv2d, matmul, max_pool_2x2, pooled_dim, softmax};
pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, Tape, Var};

use crate::error::{FamError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(FamError::Contract(format!(
                "tensor shape {shape:?} must be a nonempty list of positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FamError::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data).map_err(|_| FamError::Dimension {
            op: "reshape",
            left: self.shape.clone(),
            right: shape.to_vec(),
        })
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Primal parts as a plain `f64` tensor.
    pub fn real(&self) -> Tensor<f64> {
        self.map(|v| v.re())
    }

    pub(crate) fn add_assign_checked(&mut self, other: &Tensor<S>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(FamError::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

impl Tensor<f64> {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape.to_vec(), data)
    }

    pub fn to_dual(&self, tangent: &Tensor<f64>) -> Result<Tensor<Dual>> {
        if self.shape != tangent.shape {
            return Err(FamError::Dimension {
                op: "to_dual",
                left: self.shape.clone(),
                right: tangent.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&tangent.data)
                .map(|(&re, &eps)| Dual::new(re, eps))
                .collect(),
        })
    }
}

impl Tensor<Dual> {
    pub fn tangent(&self) -> Tensor<f64> {
        self.map(|v: Dual| v.eps)
    }
}
