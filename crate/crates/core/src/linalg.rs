//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SurError};

/// Relative pivot threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let inv = chol.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// Inverse of a general square matrix via partially pivoted LU.
pub fn general_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.clone().lu().try_inverse()?;
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// True when `a` is symmetric positive definite with a reasonable
/// eigenvalue ratio.
pub fn is_well_conditioned_spd(a: &DMatrix<f64>, tol: f64) -> bool {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max.is_finite() && max > 0.0 && min > tol * max
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// φ(A) = |A|^{-1/m} A, the unit-determinant rescaling of a PD matrix.
pub fn unit_det(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = a.nrows();
    let det = a.determinant();
    if !(det.is_finite() && det > 0.0) {
        return None;
    }
    Some(a * det.powf(-1.0 / m as f64))
}

/// Symmetric inverse square root A^{-1/2} of an SPD matrix.
pub fn inv_sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(a).symmetric_eigen();
    let max = eig.eigenvalues.max();
    if eig.eigenvalues.iter().any(|&l| !(l > RANK_TOL * max)) {
        return Err(SurError::SingularCovariance("matrix is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Correlation matrix of a covariance matrix.
pub fn correlation(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let m = sigma.nrows();
    DMatrix::from_fn(m, m, |i, j| sigma[(i, j)] / (sigma[(i, i)] * sigma[(j, j)]).sqrt())
}

/// Least squares via column-pivoted QR with a relative rank check.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if n < p {
        return Err(SurError::RankDeficient(format!("{n} rows for {p} columns")));
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let max_pivot = r[(0, 0)].abs();
    for i in 0..p {
        if !(r[(i, i)].abs() > RANK_TOL * max_pivot) {
            return Err(SurError::RankDeficient(format!(
                "design has numerical rank below {p}"
            )));
        }
    }
    let qty = qr.q().transpose() * y;
    let z = r
        .solve_upper_triangular(&qty.rows(0, p).into_owned())
        .ok_or_else(|| SurError::RankDeficient("triangular solve failed".into()))?;
    let mut beta = z;
    qr.p().inv_permute_rows(&mut beta);
    Ok(beta)
}

/// Largest absolute entry.
pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}
