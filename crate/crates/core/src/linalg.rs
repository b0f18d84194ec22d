//! Small dense kernels for the per-state active-subspace computations.
//!
//! Matrices are square, row-major `Vec<f64>` buffers of side `k`. These are
//! only used for `k = |s|`, which stays small for sparse states.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// In-place Cholesky factorisation `A = L Lᵀ`; the lower triangle of `a`
/// is overwritten with `L`, the strict upper triangle is zeroed.
pub fn cholesky_in_place(a: &mut [f64], k: usize) -> Result<()> {
    for j in 0..k {
        let mut diag = a[j * k + j];
        for p in 0..j {
            diag -= a[j * k + p] * a[j * k + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("pivot {j} is {diag:e}")));
        }
        let ljj = diag.sqrt();
        a[j * k + j] = ljj;
        for i in j + 1..k {
            let mut v = a[i * k + j];
            for p in 0..j {
                v -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = v / ljj;
        }
        for i in 0..j {
            a[i * k + j] = 0.0;
        }
    }
    Ok(())
}

/// `log |A|` from its Cholesky factor.
pub fn cholesky_log_det(l: &[f64], k: usize) -> f64 {
    2.0 * (0..k).map(|i| l[i * k + i].ln()).sum::<f64>()
}

/// Solve `L x = b` in place.
pub fn forward_solve(l: &[f64], k: usize, b: &mut [f64]) {
    for i in 0..k {
        let mut v = b[i];
        for p in 0..i {
            v -= l[i * k + p] * b[p];
        }
        b[i] = v / l[i * k + i];
    }
}

/// Solve `Lᵀ x = b` in place.
pub fn backward_solve(l: &[f64], k: usize, b: &mut [f64]) {
    for i in (0..k).rev() {
        let mut v = b[i];
        for p in i + 1..k {
            v -= l[p * k + i] * b[p];
        }
        b[i] = v / l[i * k + i];
    }
}

/// Solve `X A = B` for `X` where `A` is symmetric positive definite
/// (rows of `B` are independent right-hand sides).
pub fn solve_right_spd(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("gram matrix is not positive definite".into()))?;
    // X A = B  <=>  A Xᵀ = Bᵀ (A symmetric)
    Ok(chol.solve(&b.transpose()).transpose())
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("gram matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Add `1e-9 · trace / size` to the diagonal.
pub fn add_relative_ridge(a: &mut DMatrix<f64>) {
    let size = a.nrows();
    if size == 0 {
        return;
    }
    let ridge = 1e-9 * a.trace() / size as f64;
    for i in 0..size {
        a[(i, i)] += ridge;
    }
}
