//! Dense `f32` tensors and a define-by-run reverse-mode tape.
//!
//! The tape records only the handful of operations the registration
//! pipeline needs: 5×5 same-padded convolution, ReLU, channel concatenation,
//! bilinear sampling with border clamping, separable Gaussian blur,
//! elementwise arithmetic and reductions. A fresh [`Tape`] is built for
//! every optimizer iteration and consumed by [`Tape::backward`].

pub mod blur;
pub mod conv;
pub mod sample;
mod tape;

pub use tape::{CustomOp, Gradients, Tape, Var};

use crate::error::{contract, Error, Result};

/// A contiguous row-major array of up to four extents.
///
/// Image-like tensors use the `[batch, channel, height, width]` layout with
/// `batch == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(contract("tensor", format!("rank {} exceeds 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `(channels, height, width)` of a `[1, C, H, W]` tensor.
    pub fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[1, c, h, w] => Ok((c, h, w)),
            s => Err(contract(op, format!("expected a [1, C, H, W] tensor, got {s:?}"))),
        }
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op, detail: None })
        }
    }
}
