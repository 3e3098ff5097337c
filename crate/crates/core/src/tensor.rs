use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::kernels;
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            bail!(Dimension, "shape {shape:?} has a zero extent");
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(Dimension, "shape {shape:?} needs {numel} entries, got {}", data.len());
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Dimension, "ragged rows");
        }
        Self::new(&[rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning the flag off also drops any gradient buffer.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if !self.requires_grad {
            bail!(Contract, "gradient delivered to a tensor that does not require grad");
        }
        if g.len() != self.data.len() {
            bail!(Dimension, "gradient of {} entries for tensor of {}", g.len(), self.data.len());
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 { self.shape[1..].iter().product() } else { 1 }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            bail!(Dimension, "matmul {:?} x {:?}", self.shape, other.shape);
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); n * m];
        kernels::gemm(&self.data, &other.data, &mut out, n, k, m);
        Tensor::new(&[n, m], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        if !self.is_matrix() {
            bail!(Dimension, "transpose of rank-{} tensor", self.shape.len());
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Tensor::new(&[c, r], kernels::transpose(&self.data, r, c))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub(crate) fn check_same_shape(&self, other: &[usize], what: &str) -> Result<()> {
        if self.shape != other {
            return Err(crate::Error::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_row_col() {
        let i = Tensor::from_rows(&[&[1.0f64, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
        let r = Tensor::from_rows(&[&[1.0f64, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn data_length_must_match_shape() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn grad_slot_follows_flag() {
        let mut t = Tensor::<f32>::zeros(&[2]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
        assert!(t.accumulate_grad(&[1.0, 1.0]).is_err());
    }
}
