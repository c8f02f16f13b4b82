//! Dense row-major f64 tensors.
//!
//! Everything numeric in this crate runs on these: images as `[3, H, W]`,
//! manifolds as `[8, h, w]`, latents as `[4, h, w]`, vectors as `[D]`.
//! The buffer is behind an `Arc` so cloning a tensor is cheap; mutation
//! copies on write only when the buffer is shared.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Tensor {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} vs {} elements", data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Tensor {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(Vec::new(), vec![value])
    }

    /// Standard-normal entries, consumed from `rng` in index order.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Tensor {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.normal()).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert!(self.same_shape(other), "{:?} vs {:?}", self.shape, other.shape);
        let data: Vec<f64> =
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mse(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other));
        let n = self.numel() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Channel count of a `[C, H, W]` tensor.
    pub fn channels(&self) -> usize {
        assert_eq!(self.shape.len(), 3, "expected [C,H,W], got {:?}", self.shape);
        self.shape[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C,H,W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// Borrow channel `c` of a `[C, H, W]` tensor as a flat `&[f64]` of len H*W.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (ch, h, w) = self.chw();
        assert!(c < ch);
        &self.data[c * h * w..(c + 1) * h * w]
    }

    /// Channels `[from, to)` of a `[C, H, W]` tensor as a new tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(from < to && to <= c);
        let data = self.data[from * h * w..to * h * w].to_vec();
        Tensor::from_vec(vec![to - from, h, w], data)
    }

    /// Stack two `[C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        let (c0, h0, w0) = self.chw();
        let (c1, h1, w1) = other.chw();
        assert_eq!((h0, w0), (h1, w1), "spatial dims differ");
        let mut data = Vec::with_capacity((c0 + c1) * h0 * w0);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(vec![c0 + c1, h0, w0], data)
    }
}

/// `y += alpha * x`, the workhorse of the conv kernels.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}
