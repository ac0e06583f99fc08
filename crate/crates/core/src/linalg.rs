//! Small dense symmetric solvers used by the Newton-type fits and the Wald test.
//!
//! Dimensions here are the number of covariates (plus an intercept), so plain
//! row-major storage and O(p³) factorizations are all that is needed.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Square matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![T::zero(); dim * dim] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim, "matrix must be square");
            m.data[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.dim + j] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.dim + j] += v;
    }

    /// Adds `v` to every diagonal entry.
    pub fn add_diagonal(&mut self, v: T) {
        for i in 0..self.dim {
            self.add_to(i, i, v);
        }
    }

    /// Copies the upper triangle onto the lower one.
    pub fn symmetrize_from_upper(&mut self) {
        for i in 0..self.dim {
            for j in 0..i {
                let v = self.get(j, i);
                self.set(i, j, v);
            }
        }
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Result<Cholesky<T>> {
        let n = self.dim;
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::Singular(format!("non-positive pivot at column {j}")));
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Cholesky { dim: n, l })
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<T> {
        let n = self.dim;
        let mut a = self.data.clone();
        let tol = T::epsilon() * T::epsilon();
        for _sweep in 0..100 {
            let mut off = T::zero();
            let mut total = T::zero();
            for i in 0..n {
                for j in 0..n {
                    let v = a[i * n + j] * a[i * n + j];
                    total += v;
                    if i != j {
                        off += v;
                    }
                }
            }
            if off <= tol * total || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq == T::zero() {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (T::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<T> = (0..n).map(|i| a[i * n + i]).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    /// Spectral condition number; infinite for singular or indefinite input.
    pub fn condition_number(&self) -> T {
        let ev = self.symmetric_eigenvalues();
        match (ev.first(), ev.last()) {
            (Some(&lo), Some(&hi)) if lo > T::zero() => hi / lo,
            _ => T::infinity(),
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }
}

/// Cholesky factorization `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    dim: usize,
    l: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// `L x`, e.g. to colour independent normal draws.
    pub fn lower_mul(&self, x: &[T]) -> Vec<T> {
        let n = self.dim;
        (0..n).map(|i| (0..=i).map(|k| self.l[i * n + k] * x[k]).sum()).collect()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// `bᵀ A⁻¹ b` computed as `‖L⁻¹ b‖²`.
    pub fn quadratic_form_inverse(&self, b: &[T]) -> T {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y.iter().map(|&v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = SquareMatrix::from_rows(&[
            vec![4.0, 2.0, 0.6],
            vec![2.0, 5.0, 1.0],
            vec![0.6, 1.0, 3.0],
        ]);
        let x: Vec<f64> = vec![1.0, -2.0, 0.5];
        let b = a.mul_vec(&x);
        let sol = a.cholesky().unwrap().solve(&b);
        for (s, t) in sol.iter().zip(&x) {
            assert!((s - t).abs() < 1e-13);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = SquareMatrix::from_rows(&[vec![2.0_f64, 1.0], vec![1.0, 2.0]]);
        let ev = a.symmetric_eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-14);
        assert!((ev[1] - 3.0).abs() < 1e-14);
        assert!((a.condition_number() - 3.0).abs() < 1e-13);
    }

    #[test]
    fn quadratic_form_matches_solve() {
        let a = SquareMatrix::from_rows(&[vec![3.0_f32, 1.0], vec![1.0, 2.0]]);
        let b = [1.0_f32, 2.0];
        let ch = a.cholesky().unwrap();
        let x = ch.solve(&b);
        let direct: f32 = b.iter().zip(&x).map(|(p, q)| p * q).sum();
        assert!((ch.quadratic_form_inverse(&b) - direct).abs() < 1e-5);
    }
}
