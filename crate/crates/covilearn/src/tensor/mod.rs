//! N-dimensional `f64` tensors and the layer-level operations built on them.
//!
//! A [`Tensor`] is a flat row-major buffer plus a shape. Tensors are immutable
//! values once created, so a fixed set of them can be read from any number of
//! threads. All math runs in 64-bit floats; the on-disk weights container is
//! the only place 32-bit floats appear.

pub mod autodiff;
pub mod ops;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape has positive extents and that
    /// the buffer length matches `product(shape)`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::argument("tensor shape must have at least one axis"));
        }
        if let Some(zero) = shape.iter().position(|&e| e == 0) {
            return Err(Error::argument(format!(
                "tensor extents must be positive, axis {zero} of {shape:?} is zero"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements but buffer holds {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: vec![value; len] }
    }

    /// Rank-1 tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                len
            )));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks same-shape tensors along a new leading batch axis.
    pub fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::argument("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * tensors.len());
        for t in tensors {
            if t.shape() != first.shape() {
                return Err(Error::dimension(format!(
                    "stack shapes differ: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![tensors.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(shape, data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dimension(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Splits an activation shape into `[N, C, H, W]`.
    pub(crate) fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::dimension(format!(
                "{what} expects a rank-4 [N,C,H,W] tensor, got shape {other:?}"
            ))),
        }
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[n, d] => Ok((n, d)),
            other => Err(Error::dimension(format!(
                "{what} expects a rank-2 [N,D] tensor, got shape {other:?}"
            ))),
        }
    }
}
