use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor `A = L L^T` of a dense symmetric matrix.
///
/// Only the lower triangle of the input is read.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::invalid("Cholesky needs a square matrix"));
        }
        let mut l = a.clone();
        let data = l.as_mut_slice();
        // left-looking, column-major: column j only reads columns k < j
        for j in 0..n {
            let (done, rest) = data.split_at_mut(j * n);
            let col_j = &mut rest[..n];
            for k in 0..j {
                let col_k = &done[k * n..(k + 1) * n];
                let ljk = col_k[j];
                if ljk == 0.0 {
                    continue;
                }
                for (dst, src) in col_j[j..].iter_mut().zip(&col_k[j..]) {
                    *dst -= ljk * src;
                }
            }
            let pivot = col_j[j];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot });
            }
            let d = pivot.sqrt();
            col_j[j] = d;
            let inv = 1.0 / d;
            for v in col_j[j + 1..].iter_mut() {
                *v *= inv;
            }
            col_j[..j].fill(0.0);
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn forward_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        let data = self.l.as_slice();
        for j in 0..n {
            let col = &data[j * n..(j + 1) * n];
            x[j] /= col[j];
            let xj = x[j];
            if xj != 0.0 {
                for (xi, lij) in x[j + 1..].iter_mut().zip(&col[j + 1..]) {
                    *xi -= xj * lij;
                }
            }
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn backward_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        let data = self.l.as_slice();
        for j in (0..n).rev() {
            let col = &data[j * n..(j + 1) * n];
            let dot: f64 = col[j + 1..].iter().zip(&x[j + 1..]).map(|(a, b)| a * b).sum();
            x[j] = (x[j] - dot) / col[j];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.solve(b.as_slice()))
    }

    /// Full inverse `A^{-1} = L^{-T} L^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        // columns of L^{-1}
        let mut linv = DMatrix::<f64>::zeros(n, n);
        {
            let data = linv.as_mut_slice();
            for k in 0..n {
                let col = &mut data[k * n..(k + 1) * n];
                col[k] = 1.0;
                self.forward_in_place(col);
            }
        }
        // (A^{-1})_{ij} = sum_k Linv[k,i] Linv[k,j]; Linv[k,i] is zero for k < i
        let t = linv.as_slice();
        let mut inv = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let cj = &t[j * n..(j + 1) * n];
            for i in j..n {
                let ci = &t[i * n..(i + 1) * n];
                let s: f64 = ci[i..].iter().zip(&cj[i..]).map(|(a, b)| a * b).sum();
                inv[(i, j)] = s;
                inv[(j, i)] = s;
            }
        }
        inv
    }
}
