//! Small dense linear algebra for channel-mixing matrices.

use crate::error::{Error, Result};

/// Determinants with magnitude below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// LU factorisation with partial pivoting of a row-major `n x n` matrix.
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Lu {
        debug_assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for col in 0..n {
            let pivot =
                (col..n).max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs())).unwrap_or(col);
            if pivot != col {
                for k in 0..n {
                    lu.swap(col * n + k, pivot * n + k);
                }
                perm.swap(col, pivot);
                sign = -sign;
            }
            let d = lu[col * n + col];
            if d == 0.0 {
                continue;
            }
            for row in col + 1..n {
                let f = lu[row * n + col] / d;
                lu[row * n + col] = f;
                for k in col + 1..n {
                    lu[row * n + k] -= f * lu[col * n + k];
                }
            }
        }
        Lu { n, lu, perm, sign }
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>()
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    fn check_regular(&self) -> Result<()> {
        let log = self.log_abs_det();
        if !log.is_finite() || log < SINGULAR_DET.ln() {
            return Err(Error::Singular { det: self.det() });
        }
        Ok(())
    }

    /// Solves `A x = b` in place.
    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let rhs: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        b.copy_from_slice(&rhs);
        for i in 0..n {
            for k in 0..i {
                b[i] -= self.lu[i * n + k] * b[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                b[i] -= self.lu[i * n + k] * b[k];
            }
            b[i] /= self.lu[i * n + i];
        }
    }

    pub fn inverse(&self) -> Result<Vec<f64>> {
        self.check_regular()?;
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[col] = 1.0;
            self.solve(&mut e);
            for row in 0..n {
                inv[row * n + col] = e[row];
            }
        }
        Ok(inv)
    }
}

/// `(log|det A|, A^{-1})`, rejecting matrices with `|det A| < 1e-12`.
pub fn log_abs_det_and_inverse(a: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
    let lu = Lu::factor(a, n);
    lu.check_regular()?;
    Ok((lu.log_abs_det(), lu.inverse()?))
}

pub fn inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    Lu::factor(a, n).inverse()
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Orthonormalises the rows of a square matrix (modified Gram-Schmidt).
pub fn orthonormalize(a: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum();
            for k in 0..n {
                a[i * n + k] -= dot * a[j * n + k];
            }
        }
        let norm = (0..n).map(|k| a[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Degenerate("rank-deficient matrix in orthonormalize".into()));
        }
        for k in 0..n {
            a[i * n + k] /= norm;
        }
    }
    Ok(())
}
