//! Small dense kernels the solver needs on every patch group.
//!
//! Matrices are nalgebra `DMatrix<f64>` (column-major). The Cholesky factor is
//! hand-rolled so a breakdown can report which pivot failed.

use nalgebra::{DMatrix, DVector};

use crate::error::{HbeError, Result};

/// Lower-triangular Cholesky factor `A = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factors `a`, reading only its lower triangle.
    pub fn factor(a: &DMatrix<f64>, context: &'static str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(HbeError::Argument(format!(
                "{context}: cannot factor a {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let mut l = a.clone();
        {
            // left-looking by columns so every inner update is a contiguous axpy
            let s = l.as_mut_slice();
            for j in 0..n {
                let (done, rest) = s.split_at_mut(j * n);
                let col = &mut rest[..n];
                for k in 0..j {
                    let ck = &done[k * n..(k + 1) * n];
                    let f = ck[j];
                    if f != 0.0 {
                        for (c, v) in col[j..].iter_mut().zip(&ck[j..]) {
                            *c -= f * v;
                        }
                    }
                }
                let d = col[j];
                if !(d > 0.0) || !d.is_finite() {
                    return Err(HbeError::NotPositiveDefinite {
                        context,
                        pivot: j,
                        value: d,
                    });
                }
                let d = d.sqrt();
                col[j] = d;
                for v in &mut col[j + 1..] {
                    *v /= d;
                }
                for v in &mut col[..j] {
                    *v = 0.0;
                }
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let s = self.l.as_slice();
        for k in 0..n {
            let col = &s[k * n..(k + 1) * n];
            let v = b[k] / col[k];
            b[k] = v;
            if v != 0.0 {
                for (x, l) in b[k + 1..].iter_mut().zip(&col[k + 1..]) {
                    *x -= v * l;
                }
            }
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let s = self.l.as_slice();
        for i in (0..n).rev() {
            let col = &s[i * n..(i + 1) * n];
            let dot: f64 = col[i + 1..].iter().zip(&b[i + 1..]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - dot) / col[i];
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.forward_in_place(x.as_mut_slice());
        self.backward_in_place(x.as_mut_slice());
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for col in x.as_mut_slice().chunks_exact_mut(n) {
            self.forward_in_place(col);
            self.backward_in_place(col);
        }
        x
    }

    /// `L⁻¹`, lower triangular.
    pub fn inverse_lower(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::identity(n, n);
        // forward substitution skips the leading zeros of each unit column
        for col in inv.as_mut_slice().chunks_exact_mut(n) {
            self.forward_in_place(col);
        }
        inv
    }

    /// `A⁻¹ = L⁻ᵀL⁻¹`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let li = self.inverse_lower();
        symmetrize(&(li.transpose() * li))
    }

    /// `vᵀ A⁻¹ v`.
    pub fn inv_quad(&self, v: &[f64]) -> f64 {
        let mut y = v.to_vec();
        self.forward_in_place(&mut y);
        y.iter().map(|x| x * x).sum()
    }
}

/// `(X + Xᵀ) / 2`.
pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

/// `vᵀ A v` for a square `a`.
pub fn quad_form(a: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(a * v))
}

/// Largest asymmetry `|a_ij - a_ji|` relative to the largest entry.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}
