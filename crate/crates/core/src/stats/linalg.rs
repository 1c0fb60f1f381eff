//! Small dense matrices and the cyclic Jacobi eigensolver.
//!
//! Dimensions here are the number of equations `d` (at most a handful), so
//! everything is stored row-major in a `Vec<f64>` and nothing is blocked.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const OFFDIAG_TOL: f64 = 1e-13;
const MAX_SWEEPS: usize = 100;
/// Eigenvalues above this negative threshold are treated as zero by PSD routines.
pub const PSD_CLAMP: f64 = -1e-10;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// Frobenius (Hilbert–Schmidt) norm.
    pub fn hs_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Eigendecomposition of a symmetric matrix: values ascending, eigenvectors as
/// the columns of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Symmetric matrix with a lazily cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    inner: Matrix,
    eig: OnceLock<Eigen>,
}

impl PartialEq for SymMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.inner.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Matrix::deserialize(d)?;
        SymMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

impl SymMatrix {
    /// Wraps a square matrix, rejecting asymmetry beyond 1e-12 (relative to its size).
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::config(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let scale = m.hs_norm().max(1.0);
        for i in 0..m.rows {
            for j in (i + 1)..m.cols {
                if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::config(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        m.get(i, j),
                        m.get(j, i)
                    )));
                }
            }
        }
        Ok(SymMatrix {
            inner: m,
            eig: OnceLock::new(),
        })
    }

    /// Builds a symmetric matrix by averaging `m` with its transpose.
    pub fn symmetrized(m: &Matrix) -> Self {
        assert_eq!(m.rows, m.cols);
        let n = m.rows;
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, 0.5 * (m.get(i, j) + m.get(j, i)));
            }
        }
        SymMatrix {
            inner: s,
            eig: OnceLock::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::symmetrized(&Matrix::identity(n))
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.set(i, i, *v);
        }
        Self::symmetrized(&m)
    }

    pub fn dim(&self) -> usize {
        self.inner.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn eigen(&self) -> &Eigen {
        self.eig.get_or_init(|| jacobi(&self.inner))
    }

    pub fn op_norm(&self) -> f64 {
        op_norm(self)
    }

    pub fn hs_norm(&self) -> f64 {
        self.inner.hs_norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().values.first().copied().unwrap_or(0.0)
    }

    /// Applies `f` to the spectrum: `Q f(Λ) Qᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let e = self.eigen();
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        for (k, &lam) in e.values.iter().enumerate() {
            let fl = f(lam);
            for i in 0..n {
                let qi = e.vectors.get(i, k) * fl;
                for j in 0..n {
                    out.data[i * n + j] += qi * e.vectors.get(j, k);
                }
            }
        }
        SymMatrix::symmetrized(&out)
    }

    /// Principal square root of a PSD matrix (eigenvalues above [`PSD_CLAMP`] clamped to 0).
    pub fn sqrt_psd(&self) -> Result<SymMatrix> {
        self.check_psd("matrix")?;
        Ok(self.map_spectrum(|l| l.max(0.0).sqrt()))
    }

    pub(crate) fn check_psd(&self, name: &str) -> Result<()> {
        let scale = self.op_norm().max(1.0);
        let lmin = self.min_eigenvalue();
        if lmin < PSD_CLAMP * scale {
            return Err(Error::config(format!(
                "{name} is not positive semidefinite (minimum eigenvalue {lmin:e})"
            )));
        }
        Ok(())
    }

    /// Inverse, refusing matrices whose smallest eigenvalue is not above 1e-12
    /// (relative to `max(1, ‖A‖_op)`).
    pub fn inverse_checked(&self, name: &str) -> Result<SymMatrix> {
        self.check_invertible(name)?;
        Ok(self.map_spectrum(|l| 1.0 / l))
    }

    pub(crate) fn check_invertible(&self, name: &str) -> Result<()> {
        let lmin = self.min_eigenvalue();
        if !(lmin > INVERTIBLE_TOL * self.op_norm().max(1.0)) {
            return Err(Error::Singular {
                matrix: name.to_string(),
                min_eigenvalue: lmin,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        let m = Matrix {
            rows: self.dim(),
            cols: self.dim(),
            data: self.inner.data.iter().zip(&other.inner.data).map(|(a, b)| a + b).collect(),
        };
        SymMatrix::symmetrized(&m)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        let mut m = self.inner.clone();
        m.data.iter_mut().for_each(|v| *v *= s);
        SymMatrix::symmetrized(&m)
    }
}

/// Minimum-eigenvalue threshold for invertibility, relative to `max(1, ‖A‖_op)`.
pub const INVERTIBLE_TOL: f64 = 1e-12;

/// Eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops below `1e-13·‖A‖_F`.
pub fn sym_eig(a: &SymMatrix) -> Eigen {
    a.eigen().clone()
}

fn jacobi(a: &Matrix) -> Eigen {
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let norm = m.hs_norm();
    if norm > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m.get(i, j).powi(2))
                .sum::<f64>()
                .sqrt();
            if off < OFFDIAG_TOL * norm {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m.get(p, q);
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    // A <- Jᵀ A J on rows/columns p and q.
                    for k in 0..n {
                        let akp = m.get(k, p);
                        let akq = m.get(k, q);
                        m.set(k, p, c * akp - s * akq);
                        m.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = m.get(p, k);
                        let aqk = m.get(q, k);
                        m.set(p, k, c * apk - s * aqk);
                        m.set(q, k, s * apk + c * aqk);
                    }
                    m.set(p, q, 0.0);
                    m.set(q, p, 0.0);
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, src));
        }
    }
    Eigen { values, vectors }
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn op_norm(a: &SymMatrix) -> f64 {
    a.eigen().values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Hilbert–Schmidt norm `sqrt(Σ a_ij²)`.
pub fn hs_norm(a: &Matrix) -> f64 {
    a.hs_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(n: usize, data: Vec<f64>) -> SymMatrix {
        SymMatrix::new(Matrix::from_rows(n, n, data).unwrap()).unwrap()
    }

    #[test]
    fn identity_and_diagonal_spectra() {
        assert_eq!(SymMatrix::identity(3).eigen().values, vec![1.0, 1.0, 1.0]);
        let d = SymMatrix::diag(&[3.0, 2.0]);
        assert_eq!(d.eigen().values, vec![2.0, 3.0]);
        assert_eq!(d.op_norm(), 3.0);
        assert!((d.hs_norm() - 13f64.sqrt()).abs() < 1e-15);
        let z = SymMatrix::diag(&[0.0, 0.0]);
        assert_eq!((z.op_norm(), z.hs_norm()), (0.0, 0.0));
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = Matrix::from_rows(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(SymMatrix::new(m).is_err());
    }

    #[test]
    fn singular_detection_names_the_matrix() {
        let s = sym(2, vec![1.0, 1.0, 1.0, 1.0]);
        match s.inverse_checked("C^R(t)") {
            Err(Error::Singular { matrix, .. }) => assert_eq!(matrix, "C^R(t)"),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn two_by_two_matches_characteristic_roots(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64) {
            let s = sym(2, vec![a, b, b, c]);
            let e = s.eigen();
            let mean = 0.5 * (a + c);
            let disc = (0.25 * (a - c).powi(2) + b * b).sqrt();
            let scale = 1.0 + mean.abs() + disc;
            prop_assert!((e.values[0] - (mean - disc)).abs() < 1e-12 * scale);
            prop_assert!((e.values[1] - (mean + disc)).abs() < 1e-12 * scale);
        }

        #[test]
        fn reconstruction_and_norm_equivalence(entries in proptest::collection::vec(-5.0..5.0f64, 10)) {
            // random 4x4 symmetric from 10 upper-triangular entries
            let n = 4;
            let mut m = Matrix::zeros(n, n);
            let mut it = entries.iter();
            for i in 0..n { for j in i..n { let v = *it.next().unwrap(); m.set(i, j, v); m.set(j, i, v); } }
            let s = SymMatrix::new(m.clone()).unwrap();
            let rebuilt = s.map_spectrum(|l| l);
            prop_assert!(rebuilt.matrix().sub(&m).hs_norm() <= 1e-10 * m.hs_norm().max(1e-300));
            let (op, hs) = (s.op_norm(), s.hs_norm());
            prop_assert!(op <= hs * (1.0 + 1e-12));
            prop_assert!(hs <= (n as f64).sqrt() * op * (1.0 + 1e-12));
            // eigenvectors orthonormal
            let q = &s.eigen().vectors;
            let qtq = q.transpose().matmul(q);
            prop_assert!(qtq.sub(&Matrix::identity(n)).hs_norm() < 1e-12);
        }
    }
}
