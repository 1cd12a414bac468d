//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, row-major block of `f32` values. Tensors
//! produced from a tensor that is being watched by a [`Tape`] are recorded on
//! that tape; calling [`Tape::backward`] on a scalar result then yields the
//! gradient of every recorded node. Tensors that were never watched carry no
//! node and cost nothing extra.

mod io;
mod ops;
mod optim;
mod tape;

pub use io::{read_melt, read_melt_file, write_melt, write_melt_file};
pub use optim::{Adam, AdamConfig, OptimizerState};
pub use tape::{with_corrupted_backward, Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{normal_vec, Rng};

pub(crate) use tape::NodeRef;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Bitwise value equality; tape membership is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::raw(vec![1], vec![value])
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        Self::raw(shape.to_vec(), normal_vec(rng, numel(shape), std))
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::raw(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape node.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Root mean square of the elementwise difference.
    pub fn rms_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::mismatch("rms_diff", &self.shape, &other.shape));
        }
        let ss: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok((ss / self.data.len() as f64).sqrt() as f32)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn norm(&self) -> f32 {
        self.data
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    /// Copy with one element replaced; used by finite-difference checks.
    pub fn with_value(&self, index: usize, value: f32) -> Self {
        let mut data = self.to_vec();
        data[index] = value;
        Self::raw(self.shape.clone(), data)
    }
}
