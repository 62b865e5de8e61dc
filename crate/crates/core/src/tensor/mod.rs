//! Dense tensors and the differentiable operations the networks are built from.
//!
//! Layout is channels-first and row-major: `[C, D, H, W]` for volumes and
//! `[C, H, W]` for images. All values are `f64`.

mod checkpoint;
pub mod conv;
mod gradcheck;
mod graph;
mod layer;
mod optim;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};
pub use conv::ConvSpec;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Graph, OpKind, PoolAxes, PoolKind, ScatterPlan, TraceEntry, Var};
pub use layer::{ddr_conv3d, mlp2, mlp_hidden, ConvLayer};
pub use optim::{sgd_step, OptimizerState};
pub use params::{xavier_uniform, Bound, ParamId, ParamStore};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {:?} holds {} values but {} were supplied",
            shape,
            numel,
            data.len()
        );
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Leading (channel) extent.
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Extents after the channel axis.
    pub fn spatial(&self) -> &[usize] {
        if self.shape.is_empty() {
            &[]
        } else {
            &self.shape[1..]
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial().iter().product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        ensure!(
            grad.len() == self.data.len(),
            "gradient length {} does not match tensor length {}",
            grad.len(),
            self.data.len()
        );
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        ensure!(
            grad.len() == self.data.len(),
            "gradient length {} does not match tensor length {}",
            grad.len(),
            self.data.len()
        );
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
