//! Small dense complex matrices and observables.
//!
//! This is the reference dense backend used for the deterministic
//! approximation at moderate dimension. `⟨A⟩ = tr(A) / N` is the normalized
//! trace throughout.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use num_complex::Complex64;
use thiserror::Error;

use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("matrix dimension must be positive")]
    Empty,
}

/// Square complex matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn from_row_major(n: usize, data: Vec<Complex64>) -> Result<Self, MatrixError> {
        if n == 0 {
            return Err(MatrixError::Empty);
        }
        if data.len() != n * n {
            return Err(MatrixError::Shape {
                expected: n * n,
                got: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_diagonal(diag: &[Complex64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.n, rhs.n, "matmul dimension mismatch");
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for l in 0..n {
                let a = self.data[i * n + l];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let rhs_row = &rhs.data[l * n..(l + 1) * n];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.n, "apply dimension mismatch");
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.n, rhs.n, "add dimension mismatch");
        Self {
            n: self.n,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        self.add(&rhs.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.n, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self[(j, i)])
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// `⟨A⟩ = tr(A) / N`.
    pub fn normalized_trace(&self) -> Complex64 {
        self.trace() / self.n as f64
    }

    /// `⟨AB⟩` without forming the product.
    pub fn normalized_trace_of_product(&self, rhs: &Self) -> Complex64 {
        assert_eq!(self.n, rhs.n, "trace dimension mismatch");
        let n = self.n;
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                acc += self.data[i * n + j] * rhs.data[j * n + i];
            }
        }
        acc / n as f64
    }

    /// `⟨|A|^2⟩ = ⟨A* A⟩`.
    pub fn hs_norm_sq(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum::<f64>() / self.n as f64
    }

    /// Largest entrywise deviation from `rhs`.
    pub fn max_abs_diff(&self, rhs: &Self) -> f64 {
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.n + j]
    }
}

/// `⟨x, y⟩ = Σ conj(x_i) y_i`.
pub fn inner(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn vector_norm(x: &[Complex64]) -> f64 {
    math::sqrt(x.iter().map(|a| a.norm_sqr()).sum())
}

/// A deterministic observable with its normalized Hilbert-Schmidt norm
/// `⟨|A|^2⟩^{1/2}` and a tracelessness flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableMatrix {
    data: ComplexMatrix,
    traceless: bool,
    hs_norm: f64,
}

impl ObservableMatrix {
    pub fn new(data: ComplexMatrix) -> Self {
        let hs_norm = math::sqrt(data.hs_norm_sq());
        let traceless = data.normalized_trace().norm() <= 1e-12 * hs_norm.max(f64::MIN_POSITIVE);
        Self {
            data,
            traceless,
            hs_norm,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(ComplexMatrix::identity(n))
    }

    pub fn data(&self) -> &ComplexMatrix {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn is_traceless(&self) -> bool {
        self.traceless
    }

    pub fn hs_norm(&self) -> f64 {
        self.hs_norm
    }

    /// `Å = A - ⟨A⟩ I`.
    pub fn traceless_part(&self) -> Self {
        let t = self.data.normalized_trace();
        let mut d = self.data.clone();
        for i in 0..d.dim() {
            d[(i, i)] -= t;
        }
        Self::new(d)
    }

    pub fn adjoint(&self) -> Self {
        Self::new(self.data.adjoint())
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.data.transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn products_and_traces() {
        let a = ComplexMatrix::from_row_major(2, vec![c(1.0, 0.0), c(2.0, 1.0), c(0.0, -1.0), c(3.0, 0.0)]).unwrap();
        let b = ComplexMatrix::from_row_major(2, vec![c(0.0, 1.0), c(1.0, 0.0), c(1.0, 0.0), c(-1.0, 2.0)]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab[(0, 0)], c(1.0, 0.0) * c(0.0, 1.0) + c(2.0, 1.0) * c(1.0, 0.0));
        assert_eq!(ab[(1, 1)], c(0.0, -1.0) * c(1.0, 0.0) + c(3.0, 0.0) * c(-1.0, 2.0));
        assert!((ab.normalized_trace() - a.normalized_trace_of_product(&b)).norm() < 1e-15);
        assert_eq!(a.matmul(&ComplexMatrix::identity(2)), a);
        let v = [c(1.0, 1.0), c(0.0, 2.0)];
        let av = a.apply(&v);
        assert_eq!(av[1], c(0.0, -1.0) * v[0] + c(3.0, 0.0) * v[1]);
    }

    #[test]
    fn observable_norms() {
        let a = ObservableMatrix::new(ComplexMatrix::from_diagonal(&[c(1.0, 0.0), c(-1.0, 0.0)]));
        assert!(a.is_traceless());
        assert!((a.hs_norm() - 1.0).abs() < 1e-15);
        let b = ObservableMatrix::new(ComplexMatrix::from_diagonal(&[c(2.0, 0.0), c(0.0, 0.0)]));
        assert!(!b.is_traceless());
        let bt = b.traceless_part();
        assert!(bt.is_traceless());
        assert!((bt.hs_norm() - 1.0).abs() < 1e-15);
        assert!(inner(&[c(0.0, 1.0)], &[c(0.0, 1.0)]) == c(1.0, 0.0));
        assert!((vector_norm(&[c(3.0, 0.0), c(0.0, 4.0)]) - 5.0).abs() < 1e-15);
    }
}
