//! Dense row-major `f32` tensors and a reverse-mode gradient tape.

pub mod instrument;
mod kernels;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

pub use kernels::{conv2d_raw, conv_out_len, matmul_raw, maxpool2d_raw, Conv2dGeometry};
pub use ops::SpikeFn;
pub(crate) use ops::surrogate_scalar as ops_surrogate;
pub use tape::{Tape, Var};

/// Dense n-dimensional array. Cloning is cheap: the storage is shared and immutable.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.data.len();
        if n <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, n)
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} must be non-empty with entries >= 1"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {} elements but data has {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Unchecked constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        instrument::record_alloc((data.len() * std::mem::size_of::<f32>()) as u64);
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Bernoulli(p) spikes.
    pub fn bernoulli(shape: &[usize], p: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
            .collect();
        Self::from_parts(shape.to_vec(), data)
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
        self.data.to_vec()
    }

    /// Consume into the flat buffer, copying only if the storage is shared.
    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let off: usize = index
            .iter()
            .zip(strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum();
        self.data[off]
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if new_shape.is_empty() || new_shape.contains(&0) || numel(new_shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, new_shape));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn sum(&self) -> f64 {
        let mut lanes = [0.0f64; 8];
        let chunks = self.data.chunks_exact(8);
        let tail: f64 = chunks.remainder().iter().map(|&x| x as f64).sum();
        for c in chunks {
            for (l, &x) in lanes.iter_mut().zip(c) {
                *l += x as f64;
            }
        }
        lanes.iter().sum::<f64>() + tail
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().fold(true, |ok, &x| ok & ((x == 0.0) | (x == 1.0)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-wise `self + other` for equal shapes (no tape).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        kernels::broadcast_zip(self, other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        kernels::broadcast_zip(self, other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        kernels::sum_axis(self, axis)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self.shape.get(axis).ok_or(Error::Axis {
            op: "mean",
            axis,
            rank: self.rank(),
        })?;
        Ok(kernels::sum_axis(self, axis)?.scale(1.0 / len as f32))
    }

    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        kernels::permute(self, order)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul_raw(self, other)
    }

    /// Sum `self` down to `shape`, inverting a singleton broadcast.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        kernels::sum_to_shape(self, shape)
    }
}

/// Shape obtained by left-padding with ones and broadcasting singleton dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}
