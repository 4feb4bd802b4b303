//! Dense row-major tensors with an attached gradient slot.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::scalar::Scalar;

/// Dense n-dimensional array of scalars.
///
/// Parameters live in `Tensor`s owned by a model; the tape borrows them during
/// a forward pass and gradients are accumulated back into `grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor from `f64` values, converting into `T`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel]).expect("filled shape must be positive")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Normal(0, std) entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::of(normal.sample(rng))).collect();
        Self::from_vec(shape, data).expect("randn shape must be positive")
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::of(rng.random_range(lo..hi)))
            .collect();
        Self::from_vec(shape, data).expect("uniform shape must be positive")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length must match data");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts every element into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shapes must agree");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }
}
