//! Dense row-major tensors, the kernels that operate on them, and a
//! reverse-mode tape for differentiating compositions of those kernels.
//!
//! Values are generic over [`Float`]; training runs in `f32` and the
//! gradient-check suites run the same code in `f64`.

pub mod ops;
mod tape;

pub use ops::Unary;
pub use tape::{backward, Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use crate::error::{Result, VimError};

/// Scalar element type of a [`Tensor`].
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(VimError::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(VimError::invalid(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for kernels that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(VimError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(VimError::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Values and gradient borrowed together, for in-place optimizer updates.
    pub fn split_grad_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            acc * d + i
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Extent of the last axis and the number of slices along it.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("rank >= 1");
        (self.data.len() / cols, cols)
    }
}

pub(crate) fn check_finite<T: Float>(op: &'static str, tensor: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(VimError::NonFinite {
            op,
            tensor: tensor.to_string(),
            step: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn grads_accumulate() {
        let mut t = Tensor::<f64>::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.get(&[0, 1]), 1.0);
    }
}
