//! Dense rank-4 tensors, their kernels, and the reverse-mode tape.

pub mod conv;
pub mod ops;
pub mod tape;

use std::fmt;

use crate::error::{Error, Result};

/// `(N, C, H, W)` extents.
pub type Dims = [usize; 4];

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

/// Row-major `f64` tensor of fixed rank 4.
///
/// Vectors and matrices use the degenerate layouts `(1, C, 1, 1)` and
/// `(1, M, K, 1)`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(dims) {
            return Err(Error::shape(
                "from_vec",
                format!("{:?} needs {} values, got {}", dims, numel(dims), data.len()),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        Tensor {
            dims,
            data: vec![value; numel(dims)],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Column vector laid out as `(1, len, 1, 1)`.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            dims: [1, values.len(), 1, 1],
            data: values,
            grad: None,
        }
    }

    /// Row-major `rows x cols` matrix laid out as `(1, rows, cols, 1)`.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_vec([1, rows, cols, 1], values)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(numel(dims));
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor {
            dims,
            data,
            grad: None,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("grad length {} vs data length {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn reshape(&self, dims: Dims) -> Result<Tensor> {
        if numel(dims) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.dims, dims),
            ));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies batch element `n` out as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}
