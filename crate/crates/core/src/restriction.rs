//! Linear coefficient restrictions Rβ = q and the diagonal-Σ restriction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Restriction {
    Linear { r: DMatrix<f64>, q: DVector<f64> },
    DiagonalSigma,
}

impl Restriction {
    pub fn linear(r: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        if r.nrows() != q.len() {
            return Err(SurError::DimensionMismatch(format!(
                "R has {} rows but q has {} entries",
                r.nrows(),
                q.len()
            )));
        }
        Ok(Restriction::Linear { r, q })
    }

    /// Number of restrictions r (degrees of freedom of the tests).
    pub fn count(&self, m: usize) -> usize {
        match self {
            Restriction::Linear { r, .. } => r.nrows(),
            Restriction::DiagonalSigma => m * (m - 1) / 2,
        }
    }
}

/// Parametrization β = β⁰ + Zγ of the affine set {β : Rβ = q}.
///
/// Built from the reduced row echelon form of (R | q), so coordinate and
/// equality restrictions produce exact zeros and exact copies.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub z: DMatrix<f64>,
    pub beta0: DVector<f64>,
}

impl LinearConstraint {
    pub fn new(r: &DMatrix<f64>, q: &DVector<f64>) -> Result<Self> {
        let (rows, p) = r.shape();
        if rows != q.len() {
            return Err(SurError::DimensionMismatch("R and q disagree".into()));
        }
        if rows == 0 || rows >= p {
            return Err(SurError::InvalidInput(format!(
                "need 1 <= r < p restrictions, got r = {rows}, p = {p}"
            )));
        }
        let mut a = DMatrix::zeros(rows, p + 1);
        a.view_mut((0, 0), (rows, p)).copy_from(r);
        a.set_column(p, q);
        let scale = r.amax();
        if !(scale > 0.0) {
            return Err(SurError::InvalidInput("restriction matrix is zero".into()));
        }
        let tol = 1e-10 * scale;
        let mut pivots = Vec::with_capacity(rows);
        let mut row = 0;
        for col in 0..p {
            if row == rows {
                break;
            }
            let (best, val) = (row..rows)
                .map(|i| (i, a[(i, col)].abs()))
                .fold((row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if val <= tol {
                continue;
            }
            a.swap_rows(row, best);
            let piv = a[(row, col)];
            for c in 0..=p {
                a[(row, c)] /= piv;
            }
            a[(row, col)] = 1.0;
            for i in 0..rows {
                if i != row {
                    let f = a[(i, col)];
                    if f != 0.0 {
                        for c in 0..=p {
                            a[(i, c)] -= f * a[(row, c)];
                        }
                        a[(i, col)] = 0.0;
                    }
                }
            }
            pivots.push(col);
            row += 1;
        }
        if pivots.len() < rows {
            for i in pivots.len()..rows {
                if a[(i, p)].abs() > tol * (1.0 + q.amax()) {
                    return Err(SurError::InconsistentRestriction("Rβ = q has no solution".into()));
                }
            }
            return Err(SurError::InvalidInput("restriction matrix is not of full row rank".into()));
        }
        let free: Vec<usize> = (0..p).filter(|c| !pivots.contains(c)).collect();
        let mut z = DMatrix::zeros(p, free.len());
        for (f, &col) in free.iter().enumerate() {
            z[(col, f)] = 1.0;
            for (i, &pc) in pivots.iter().enumerate() {
                z[(pc, f)] = -a[(i, col)];
            }
        }
        let mut beta0 = DVector::zeros(p);
        for (i, &pc) in pivots.iter().enumerate() {
            beta0[pc] = a[(i, p)];
        }
        Ok(LinearConstraint { z, beta0 })
    }

    pub fn expand(&self, gamma: &DVector<f64>) -> DVector<f64> {
        &self.beta0 + &self.z * gamma
    }
}
