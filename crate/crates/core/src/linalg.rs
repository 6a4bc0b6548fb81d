//! Small dense linear algebra helpers: a Cholesky factorization that reports
//! its failing pivot, jitter escalation, and triangular solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// First jitter (relative to the mean diagonal) added when a factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factorizes a symmetric positive definite matrix. Only the lower
    /// triangle of `a` is read.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        Self::with_jitter(a, 0.0)
    }

    fn with_jitter(a: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "Cholesky needs a square matrix");
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)] + jitter;
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: d, row: j });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l, jitter })
    }

    /// Factorizes `a`, adding diagonal jitter 1e-10, 1e-9, ... up to 1e-6
    /// (relative to the mean diagonal) on failure. The returned error carries
    /// the pivot of the plain attempt.
    pub fn with_escalation(a: &DMatrix<f64>) -> Result<Self> {
        let first = match Self::new(a) {
            Ok(c) => return Ok(c),
            Err(e) => e,
        };
        let n = a.nrows().max(1);
        let mean_diag = (0..a.nrows()).map(|i| a[(i, i)].abs()).sum::<f64>() / n as f64;
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut jitter = JITTER_START;
        while jitter <= JITTER_MAX * (1.0 + 1e-9) {
            if let Ok(c) = Self::with_jitter(a, jitter * scale) {
                log::warn!("factorization needed diagonal jitter {jitter:e}");
                return Ok(c);
            }
            jitter *= 10.0;
        }
        Err(first)
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice());
        self.solve_upper_in_place(x.as_mut_slice());
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let s = col.as_mut_slice();
            self.solve_lower_in_place(s);
            self.solve_upper_in_place(s);
        }
        x
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn quadratic_form(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.solve_lower_in_place(&mut y);
        y.iter().map(|v| v * v).sum()
    }
}

/// Checks that `a` is symmetric to a relative tolerance.
pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for i in 0..a.nrows() {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
