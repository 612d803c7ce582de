//! Dense row-major tensors plus the elementary image operations the rest of
//! the crate is built on (normalization, resize, convolution, concatenation)
//! and a small binary fixture file format.

mod io;
pub(crate) mod ops;

pub use io::{read_tensor_file, write_tensor_file, write_tensor_file_f32};
pub use ops::{bilinear_resize, concat_channels, conv2d, l2_normalize, sobel_magnitude, ConvParams};

use crate::error::{PdssError, Result};
use rand::Rng;

/// Dense, row-major `f64` tensor. Extents are strictly positive; rank 0 is a
/// scalar. The checked constructor rejects non-finite values so that
/// downstream code can assume finite data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(PdssError::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PdssError::ShapeMismatch(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(PdssError::NonFinite(format!(
                "tensor construction saw {v}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internally produced values; only the shape/length
    /// contract is enforced (in debug builds).
    pub fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![v; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new_unchecked(vec![], vec![v])
    }

    /// Uniform draw in `[lo, hi)`, elementwise, in row-major order. The
    /// arithmetic is fixed (not delegated to distribution helpers) so seeded
    /// runs stay reproducible across dependency versions.
    pub fn uniform<R: Rng>(shape: &[usize], rng: &mut R, lo: f64, hi: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| lo + (hi - lo) * rng.gen::<f64>())
            .collect();
        Self::new_unchecked(shape.to_vec(), data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.shape[i]);
            off = off * self.shape[i] + x;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(PdssError::ShapeMismatch(format!(
                "zip_map {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::new_unchecked(self.shape.clone(), data))
    }

    /// Same data, different shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(PdssError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor::new_unchecked(shape, self.data.clone()))
    }

    /// Largest absolute elementwise difference (shapes must match).
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-level equality of shape and every element (distinguishes -0.0).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
