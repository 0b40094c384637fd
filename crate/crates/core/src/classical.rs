//! Classical SUR estimators: equation-by-equation OLS, GLS and the fully
//! iterated FGLS estimator, which coincides with the Gaussian MLE.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SurDataset;
use crate::design::Design;
use crate::error::{Result, SurError};
use crate::linalg::{is_well_conditioned_spd, least_squares, max_abs, spd_inverse};
use crate::restriction::LinearConstraint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalFit {
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
}

const SIGMA_COND_TOL: f64 = 1e-12;

/// Equation-by-equation least squares; returns β and the n×m residuals.
pub fn ols_per_block(ds: &SurDataset) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut beta = DVector::zeros(ds.p());
    let mut off = 0;
    for (j, b) in ds.blocks().iter().enumerate() {
        let bj = least_squares(&b.x, &b.response)
            .map_err(|e| SurError::RankDeficient(format!("block {}: {e}", j + 1)))?;
        beta.rows_mut(off, bj.len()).copy_from(&bj);
        off += bj.len();
    }
    let resid = ds.residuals(&beta);
    Ok((beta, resid))
}

fn checked_inverse(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_well_conditioned_spd(sigma, SIGMA_COND_TOL) {
        return Err(SurError::SingularCovariance("Σ is not positive definite".into()));
    }
    spd_inverse(sigma).ok_or_else(|| SurError::SingularCovariance("Σ is not positive definite".into()))
}

/// GLS estimate for a given error covariance Σ.
pub fn gls(ds: &SurDataset, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    gls_design(&Design::from_dataset(ds), sigma)
}

pub fn gls_design(design: &Design, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    if sigma.shape() != (design.m(), design.m()) {
        return Err(SurError::DimensionMismatch("Σ must be m×m".into()));
    }
    let inv = checked_inverse(sigma)?;
    design.weighted_gls(&vec![1.0; design.n()], &inv)
}

/// Residual cross-product matrix ℰᵀℰ/n.
pub fn residual_covariance(resid: &DMatrix<f64>) -> DMatrix<f64> {
    resid.transpose() * resid / resid.nrows() as f64
}

/// Gaussian log-likelihood of the SUR model.
pub fn loglik(design: &Design, beta: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let (n, m) = (design.n() as f64, design.m() as f64);
    let inv = checked_inverse(sigma)?;
    let r = design.residuals(beta.as_slice());
    let q: f64 = design.quad_forms(&r, &inv).iter().sum();
    Ok(-0.5 * n * m * (2.0 * std::f64::consts::PI).ln() - 0.5 * n * sigma.determinant().ln() - 0.5 * q)
}

/// Two-step FGLS: OLS per block, residual covariance, one GLS step.
pub fn fgls_two_step(ds: &SurDataset) -> Result<DVector<f64>> {
    let (_, resid) = ols_per_block(ds)?;
    gls(ds, &residual_covariance(&resid))
}

/// Fully iterated FGLS (the MLE).
pub fn mle_fit(ds: &SurDataset, tol: f64, max_iter: usize) -> Result<ClassicalFit> {
    let (beta0, _) = ols_per_block(ds)?;
    mle_fit_design(&Design::from_dataset(ds), Some(beta0), tol, max_iter)
}

/// Iterated FGLS on a general design, started from `init` or pooled least squares.
pub fn mle_fit_design(
    design: &Design,
    init: Option<DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<ClassicalFit> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(SurError::InvalidInput("tol must be positive and max_iter at least 1".into()));
    }
    let n = design.n();
    let mut beta = match init {
        Some(b) => b,
        None => design.weighted_gls(&vec![1.0; n], &DMatrix::identity(design.m(), design.m()))?,
    };
    let mut sigma = residual_covariance(&design.residual_matrix(&beta));
    let mut trace = Vec::new();
    for it in 1..=max_iter {
        let new_beta = gls_design(design, &sigma)?;
        let new_sigma = residual_covariance(&design.residual_matrix(&new_beta));
        checked_inverse(&new_sigma)?;
        trace.push(loglik(design, &new_beta, &new_sigma)?);
        let db = max_abs((&new_beta - &beta).as_slice());
        let ds = max_abs((&new_sigma - &sigma).as_slice());
        beta = new_beta;
        sigma = new_sigma;
        if db.max(ds) < tol {
            let ll = *trace.last().unwrap();
            return Ok(ClassicalFit { beta, sigma, iterations: it, loglik: ll, loglik_trace: trace });
        }
    }
    Err(SurError::NumericFailure(format!("iterated FGLS did not converge in {max_iter} iterations")))
}

/// MLE under Rβ = q, with β reported in the original parametrization.
pub fn restricted_mle(
    ds: &SurDataset,
    constraint: &LinearConstraint,
    tol: f64,
    max_iter: usize,
) -> Result<ClassicalFit> {
    let design = Design::from_dataset(ds).reparametrize(&constraint.z, &constraint.beta0)?;
    let fit = mle_fit_design(&design, None, tol, max_iter)?;
    Ok(ClassicalFit { beta: constraint.expand(&fit.beta), ..fit })
}
