//! Dense row-major f32 tensors.
//!
//! Data lives behind an `Arc`, so clones are cheap and tensors can be shared
//! across graph leaves without copying. Mutation goes through
//! [`Tensor::data_mut`], which unshares on demand; anything holding an older
//! clone keeps the value it saw. The optional gradient slot always matches
//! the tensor's own shape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    grad: Option<Arc<Vec<f32>>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]), grad: None }
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]), grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data), grad: None })
    }

    /// Standard normal entries, optionally scaled.
    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        let mut data = vec![0.0f32; n];
        rng.fill_normal(&mut data);
        if std != 1.0 {
            for v in &mut data {
                *v *= std;
            }
        }
        Tensor { shape: shape.to_vec(), data: Arc::new(data), grad: None }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor { shape: vec![], data: Arc::new(vec![value]), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Shared handle to the raw buffer, for zero-copy graph leaves.
    pub(crate) fn buf(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    /// Replace the buffer wholesale. Length must match the current shape.
    pub(crate) fn replace_data(&mut self, data: Vec<f32>) {
        assert_eq!(data.len(), self.numel());
        self.data = Arc::new(data);
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref().map(|v| v.as_slice())
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::dim(
                "set_grad",
                format!("gradient length {} vs tensor {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(Arc::new(grad));
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i} of {:?}", self.shape);
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    /// Largest absolute entry difference; shapes must match exactly.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f32::max)
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}
