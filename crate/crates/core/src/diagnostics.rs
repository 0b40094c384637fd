//! Outlier diagnostics: residual distances, robust distances of the
//! predictors, and the vertical outlier / leverage classification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{Block, SurDataset};
use crate::design::Design;
use crate::error::{Result, SurError};
use crate::linalg::spd_inverse;
use crate::rho::TuningConstants;
use crate::robust::{robust_fit, FitConfig};

pub const DEFAULT_QUANTILE: f64 = 0.975;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierClass {
    Regular,
    VerticalOutlier,
    GoodLeverage,
    BadLeverage,
}

impl OutlierClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutlierClass::Regular => "regular",
            OutlierClass::VerticalOutlier => "vertical_outlier",
            OutlierClass::GoodLeverage => "good_leverage",
            OutlierClass::BadLeverage => "bad_leverage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub index: usize,
    pub residual_distance: f64,
    pub robust_distance: f64,
    pub class: OutlierClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub records: Vec<DiagnosticRecord>,
    pub residual_cutoff: f64,
    pub leverage_cutoff: f64,
    pub quantile: f64,
    /// Number of non-intercept predictor columns.
    pub p_prime: usize,
}

impl Diagnostics {
    pub fn flagged(&self, class: OutlierClass) -> Vec<usize> {
        self.records.iter().filter(|r| r.class == class).map(|r| r.index).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,residual_distance,robust_distance,class,residual_cutoff,leverage_cutoff")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{},{:e},{:e}",
                r.index,
                r.residual_distance,
                r.robust_distance,
                r.class.as_str(),
                self.residual_cutoff,
                self.leverage_cutoff
            )?;
        }
        Ok(())
    }
}

/// sqrt of the χ²_df quantile.
pub fn chi_cutoff(df: usize, quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(SurError::InvalidInput(format!("quantile {quantile} outside (0, 1)")));
    }
    let chi = ChiSquared::new(df as f64).map_err(|e| SurError::InvalidInput(e.to_string()))?;
    Ok(chi.inverse_cdf(quantile).sqrt())
}

/// d_i = sqrt(e_iᵀ Σ⁻¹ e_i) at coefficients `beta`.
pub fn residual_distances(design: &Design, beta: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sinv = spd_inverse(sigma).ok_or_else(|| SurError::SingularCovariance("residual scatter is not positive definite".into()))?;
    let r = design.residuals(beta.as_slice());
    Ok(design.quad_forms(&r, &sinv).into_iter().map(|q| q.max(0.0).sqrt()).collect())
}

/// Columns of X̃ that are not constant.
pub fn non_intercept_columns(ds: &SurDataset) -> DMatrix<f64> {
    let x = ds.xtilde();
    let keep: Vec<usize> = (0..x.ncols())
        .filter(|&c| {
            let col = x.column(c);
            col.iter().any(|v| *v != col[0])
        })
        .collect();
    x.select_columns(&keep)
}

/// Robust location and scatter of the rows of `z` from an intercept-only SUR
/// fit, one block per column.
pub fn robust_location_scatter(
    z: &DMatrix<f64>,
    breakdown: f64,
    efficiency: f64,
    config: &FitConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, q) = (z.nrows(), z.ncols());
    if q == 0 {
        return Err(SurError::InvalidInput("no non-intercept predictors".into()));
    }
    let blocks: Vec<Block> = (0..q)
        .map(|j| Block::new(format!("z{j}"), DMatrix::from_element(n, 1, 1.0), z.column(j).into_owned()))
        .collect();
    let ds = SurDataset::new(blocks)?;
    let tuning = TuningConstants::new(breakdown, efficiency, q)?;
    let fit = robust_fit(&ds, &tuning, config)?;
    Ok((fit.mm.beta, fit.mm.sigma))
}

/// RD_i of the non-intercept predictor rows, and p'.
pub fn predictor_robust_distances(
    ds: &SurDataset,
    breakdown: f64,
    efficiency: f64,
    config: &FitConfig,
) -> Result<(Vec<f64>, usize)> {
    let z = non_intercept_columns(ds);
    let (loc, scatter) = robust_location_scatter(&z, breakdown, efficiency, config)?;
    let inv = spd_inverse(&scatter).ok_or_else(|| SurError::SingularCovariance("predictor scatter is singular".into()))?;
    let rd = (0..z.nrows())
        .map(|i| {
            let d = z.row(i).transpose() - &loc;
            (d.dot(&(&inv * &d))).max(0.0).sqrt()
        })
        .collect();
    Ok((rd, z.ncols()))
}

pub fn classify(d: f64, rd: f64, d_cut: f64, rd_cut: f64) -> OutlierClass {
    match (d > d_cut, rd > rd_cut) {
        (false, false) => OutlierClass::Regular,
        (true, false) => OutlierClass::VerticalOutlier,
        (false, true) => OutlierClass::GoodLeverage,
        (true, true) => OutlierClass::BadLeverage,
    }
}

/// Classify with cutoffs sqrt(χ²_{m,q}) and sqrt(χ²_{p',q}).
pub fn classify_outliers(d: &[f64], rd: &[f64], m: usize, p_prime: usize, quantile: f64) -> Result<Diagnostics> {
    if d.len() != rd.len() {
        return Err(SurError::DimensionMismatch(format!("{} residual distances but {} robust distances", d.len(), rd.len())));
    }
    let residual_cutoff = chi_cutoff(m, quantile)?;
    let leverage_cutoff = chi_cutoff(p_prime, quantile)?;
    let records = d
        .iter()
        .zip(rd)
        .enumerate()
        .map(|(index, (&d, &r))| DiagnosticRecord {
            index,
            residual_distance: d,
            robust_distance: r,
            class: classify(d, r, residual_cutoff, leverage_cutoff),
        })
        .collect();
    Ok(Diagnostics { records, residual_cutoff, leverage_cutoff, quantile, p_prime })
}
