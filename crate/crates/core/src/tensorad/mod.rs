//! Dense n-dimensional arrays with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar walks the records in reverse once and
//! returns gradients for every leaf that was marked as requiring them.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{check_gradients, GradCheck, GradCheckReport};
pub use kernels::{conv2d_forward, matmul_into};
pub use tape::{Gradients, Tape, Var};

use crate::error::{shape_err, Result};
use crate::media::RawTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dimension in {dims:?}"));
        }
        if n != data.len() {
            return Err(shape_err!("dims {dims:?} need {n} values, got {}", data.len()));
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_raw(&self) -> RawTensor {
        RawTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_raw(raw: &RawTensor) -> Result<Self> {
        Self::new(
            raw.dims.clone(),
            raw.data.iter().map(|&v| v as f64).collect(),
        )
    }
}
