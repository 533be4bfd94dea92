//! Dense row-major tensors of 64-bit reals.

use crate::error::{Error, Result};

/// A dense tensor. Learnable parameters carry `requires_grad` and, after a
/// backward pass, a gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `n x m` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::shape("from_rows", &[m], &[bad.len()]));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), m], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Replaces the gradient buffer; the length must match the data.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Row count of a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = a * b` for row-major `a: n x k`, `b: k x p`.
pub(crate) fn gemm(n: usize, k: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    if n == 0 || p == 0 {
        return;
    }
    // SAFETY: slices are at least n*k, k*p and n*p long (checked by callers) and
    // the strides describe row-major layouts within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            p,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            p as isize,
            1,
            beta,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// `c += a * b^T` for row-major `a: n x p`, `b: k x p`, `c: n x k`.
pub(crate) fn gemm_nt(n: usize, p: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if n == 0 || k == 0 {
        return;
    }
    // SAFETY: b^T is addressed with swapped strides over the same k*p buffer.
    unsafe {
        matrixmultiply::dgemm(
            n,
            p,
            k,
            1.0,
            a.as_ptr(),
            p as isize,
            1,
            b.as_ptr(),
            1,
            p as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `c += a^T * b` for row-major `a: n x k`, `b: n x p`, `c: k x p`.
pub(crate) fn gemm_tn(n: usize, k: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if k == 0 || p == 0 {
        return;
    }
    // SAFETY: a^T is addressed with swapped strides over the same n*k buffer.
    unsafe {
        matrixmultiply::dgemm(
            k,
            n,
            p,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            p as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, &b, &mut c, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|l| a[i * 3 + l] * b[l * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], s);
            }
        }
        // c (2x4) * b^T (4x3) = 2x3
        let mut d = vec![0.0; 6];
        gemm_nt(2, 4, 3, &c, &b, &mut d);
        for i in 0..2 {
            for j in 0..3 {
                let s: f64 = (0..4).map(|l| c[i * 4 + l] * b[j * 4 + l]).sum();
                assert!((d[i * 3 + j] - s).abs() < 1e-12);
            }
        }
        // a^T (3x2) * c (2x4) = 3x4
        let mut e = vec![0.0; 12];
        gemm_tn(2, 3, 4, &a, &c, &mut e);
        for i in 0..3 {
            for j in 0..4 {
                let s: f64 = (0..2).map(|l| a[l * 3 + i] * c[l * 4 + j]).sum();
                assert!((e[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }
}
