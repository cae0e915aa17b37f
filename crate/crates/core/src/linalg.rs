use nalgebra::{DMatrix, DVector};

use crate::error::{FlodeError, Result};

/// Solve `a x = rhs` for symmetric positive definite `a`.
pub(crate) fn spd_solve(a: &DMatrix<f64>, rhs: &DVector<f64>, step: &'static str) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| FlodeError::numerical(step, "matrix is not positive definite"))?;
    let x = chol.solve(rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FlodeError::numerical(step, "non-finite solution"));
    }
    Ok(x)
}

/// Least-squares style solve that tolerates a rank-deficient Gram matrix by
/// falling back to an eigenvalue pseudo-inverse.
pub(crate) fn gram_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>, step: &'static str) -> Result<DVector<f64>> {
    if let Some(chol) = gram.clone().cholesky() {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let cutoff = max * 1e-12 * gram.nrows() as f64;
    let proj = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_fn(proj.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > cutoff {
            proj[i] / l
        } else {
            0.0
        }
    });
    let x = &eig.eigenvectors * scaled;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FlodeError::numerical(step, "non-finite pseudo-inverse solution"));
    }
    Ok(x)
}

pub(crate) fn log_det_spd(a: &DMatrix<f64>, step: &'static str) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| FlodeError::numerical(step, "matrix is not positive definite"))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `blockdiag(m, …, m)` with `copies` blocks.
pub(crate) fn block_diag(m: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let k = m.nrows();
    let mut out = DMatrix::zeros(k * copies, k * copies);
    for c in 0..copies {
        out.view_mut((c * k, c * k), (k, k)).copy_from(m);
    }
    out
}

pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(A B) = Σ_ij A_ij B_ji
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}
