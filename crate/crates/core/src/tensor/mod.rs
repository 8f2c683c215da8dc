//! Dense f32 tensors and a reverse-mode tape for the handful of operations a
//! small convolutional classifier needs.

mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, Mode, Var};

use crate::error::{Error, Result};

/// Row-major dense tensor. `data.len()` always equals the product of `shape`;
/// an empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero-length axis"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-length axis in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Build a tensor from a slice, panicking on a length mismatch. Handy in tests.
    pub fn from_slice(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape.to_vec(), data.to_vec()).expect("shape/data mismatch")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product of two rank-2 tensors, without recording a tape node.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.data, &other.data, m, k, n, &mut out, false);
        Tensor::new(vec![m, n], out)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Dimension(format!(
            "matmul needs [m, k] x [k, n], got {a:?} x {b:?}"
        )));
    }
    Ok((a[0], a[1], b[1]))
}

/// Output spatial extent of a convolution or pooling window, or `None` when the
/// window does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}
