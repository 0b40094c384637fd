//! Confidence intervals for regression coefficients: asymptotic (AS),
//! bootstrap percentile (BP) and bias-corrected and accelerated (BCa).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::Design;
use crate::error::{Result, SurError};
use crate::frb::{FrbEngine, ReplicateSet};
use crate::linalg::spd_inverse;
use crate::rho::AsymptoticConstants;
use crate::robust::RobustFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CiMethod {
    #[serde(rename = "AS")]
    Asymptotic,
    #[serde(rename = "BP")]
    Percentile,
    #[serde(rename = "BCa")]
    Bca,
}

impl CiMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            CiMethod::Asymptotic => "AS",
            CiMethod::Percentile => "BP",
            CiMethod::Bca => "BCa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub parameter: String,
    pub index: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: CiMethod,
    pub level: f64,
}

impl CiResult {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Minimum replicate count for percentile intervals.
pub const MIN_REPLICATES: usize = 100;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(SurError::InvalidInput(format!("confidence level must lie in (0, 1), got {level}")))
    }
}

/// Plug-in constants from the residual distances of a fit.
pub fn empirical_constants(fit: &RobustFit) -> Result<AsymptoticConstants> {
    AsymptoticConstants::empirical(
        &fit.tuning.rho0(),
        &fit.tuning.rho1(),
        fit.tuning.delta0,
        fit.tuning.m,
        &fit.s.distances,
        &fit.mm.distances,
    )
}

/// Asymptotic covariance ASV(β̂) = α₁/(mη₁²) · E[xᵀΣ⁻¹x]⁻¹ with the
/// expectation replaced by the sample mean at Σ̂.
pub fn asymptotic_variance(fit: &RobustFit, design: &Design, constants: &AsymptoticConstants) -> Result<DMatrix<f64>> {
    let sinv = spd_inverse(&fit.mm.sigma).ok_or_else(|| SurError::SingularCovariance("Σ̂ is singular".into()))?;
    let n = design.n();
    let (info, _) = design.normal_equations(&vec![1.0 / n as f64; n], &sinv);
    let info_inv = spd_inverse(&info).ok_or_else(|| SurError::RankDeficient("empirical information is singular".into()))?;
    Ok(info_inv * constants.asv_factor())
}

/// β̂_k ± z_{1−α/2} sqrt(ASV_kk / n).
pub fn ci_from_asv(beta: &DVector<f64>, asv: &DMatrix<f64>, n: usize, level: f64, names: &[String]) -> Result<Vec<CiResult>> {
    check_level(level)?;
    let z = std_normal().inverse_cdf(0.5 + level / 2.0);
    Ok((0..beta.len())
        .map(|k| {
            let half = z * (asv[(k, k)].max(0.0) / n as f64).sqrt();
            CiResult {
                parameter: names.get(k).cloned().unwrap_or_else(|| format!("beta_{}", k + 1)),
                index: k,
                estimate: beta[k],
                lower: beta[k] - half,
                upper: beta[k] + half,
                method: CiMethod::Asymptotic,
                level,
            }
        })
        .collect())
}

pub fn ci_asymptotic(
    fit: &RobustFit,
    design: &Design,
    constants: &AsymptoticConstants,
    level: f64,
    names: &[String],
) -> Result<Vec<CiResult>> {
    let asv = asymptotic_variance(fit, design, constants)?;
    ci_from_asv(&fit.mm.beta, &asv, design.n(), level, names)
}

/// Order statistic at the 1-based fractional position `pos`, linearly
/// interpolated and clamped to the sample range.
fn order_stat(sorted: &[f64], pos: f64) -> f64 {
    let n = sorted.len();
    let p = pos.clamp(1.0, n as f64);
    let lo = p.floor() as usize;
    let frac = p - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

/// Jackknife acceleration from leave-one-out values.
pub fn acceleration(jack: &[f64]) -> f64 {
    let n = jack.len() as f64;
    let mean = jack.iter().sum::<f64>() / n;
    let num: f64 = jack.iter().map(|v| (mean - v).powi(3)).sum();
    let den: f64 = jack.iter().map(|v| (mean - v).powi(2)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / (6.0 * den.powf(1.5))
    }
}

/// Percentile interval bounds from replicate values. For BCa, `jack`
/// supplies leave-one-out values for the acceleration (zero if absent).
pub fn percentile_bounds(values: &[f64], estimate: f64, level: f64, method: CiMethod, jack: Option<&[f64]>) -> Result<(f64, f64)> {
    check_level(level)?;
    if values.len() < MIN_REPLICATES {
        return Err(SurError::InsufficientReplicates { needed: MIN_REPLICATES, have: values.len() });
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nb = sorted.len() as f64;
    let alpha = 1.0 - level;
    let (al, ar) = match method {
        CiMethod::Percentile => (alpha / 2.0, 1.0 - alpha / 2.0),
        CiMethod::Bca => {
            let norm = std_normal();
            let below = sorted.iter().filter(|&&v| v < estimate).count() as f64;
            let frac = (below / nb).clamp(1.0 / (nb + 1.0), nb / (nb + 1.0));
            let z0 = norm.inverse_cdf(frac);
            let a = jack.map(acceleration).unwrap_or(0.0);
            let adj = |zq: f64| {
                let t = z0 + zq;
                norm.cdf(z0 + t / (1.0 - a * t))
            };
            (adj(norm.inverse_cdf(alpha / 2.0)), adj(norm.inverse_cdf(1.0 - alpha / 2.0)))
        }
        CiMethod::Asymptotic => return Err(SurError::InvalidInput("asymptotic intervals are not percentile based".into())),
    };
    Ok((order_stat(&sorted, (nb + 1.0) * al), order_stat(&sorted, (nb + 1.0) * ar)))
}

pub fn ci_percentile(
    replicates: &ReplicateSet,
    parameter: usize,
    estimate: f64,
    level: f64,
    method: CiMethod,
    jack: Option<&[f64]>,
    name: &str,
) -> Result<CiResult> {
    let vals = replicates.coordinate(parameter);
    let (lower, upper) = percentile_bounds(&vals, estimate, level, method, jack)?;
    Ok(CiResult { parameter: name.to_string(), index: parameter, estimate, lower, upper, method, level })
}

/// BP and BCa intervals for every MM coefficient.
pub fn frb_intervals(engine: &FrbEngine, replicates: &ReplicateSet, level: f64, names: &[String]) -> Result<Vec<CiResult>> {
    let k = engine.theta.k();
    let jack = engine.jackknife();
    let mut out = Vec::with_capacity(2 * k);
    for method in [CiMethod::Percentile, CiMethod::Bca] {
        for j in 0..k {
            let name = names.get(j).cloned().unwrap_or_else(|| format!("beta_{}", j + 1));
            let jv: Vec<f64> = jack.iter().flatten().map(|v| v[j]).collect();
            out.push(ci_percentile(replicates, j, engine.theta_vec[j], level, method, Some(&jv), &name)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_asv_gives_degenerate_interval() {
        let b = DVector::from_vec(vec![1.5, -2.0]);
        let ci = ci_from_asv(&b, &DMatrix::zeros(2, 2), 50, 0.95, &[]).unwrap();
        for c in ci {
            assert_eq!(c.lower, c.estimate);
            assert_eq!(c.upper, c.estimate);
        }
    }

    #[test]
    fn symmetric_replicates_bca_equals_bp() {
        // 1000 equally spaced values, half below the estimate: z0 = 0; no jackknife: a = 0.
        let vals: Vec<f64> = (0..1000).map(|i| i as f64 - 499.5).collect();
        let bp = percentile_bounds(&vals, 0.0, 0.95, CiMethod::Percentile, None).unwrap();
        let bca = percentile_bounds(&vals, 0.0, 0.95, CiMethod::Bca, None).unwrap();
        assert!((bp.0 - bca.0).abs() < 1e-6 && (bp.1 - bca.1).abs() < 1e-6, "{bp:?} {bca:?}");
        // (N+1)·0.025 = 25.025, between the 25th and 26th order statistics.
        assert!((bp.0 + 475.475).abs() < 1e-9);
        assert!((bp.1 - 475.475).abs() < 1e-9);
    }

    #[test]
    fn too_few_replicates() {
        let vals = vec![0.0; 20];
        assert!(matches!(
            percentile_bounds(&vals, 0.0, 0.95, CiMethod::Percentile, None),
            Err(SurError::InsufficientReplicates { .. })
        ));
    }

    #[test]
    fn acceleration_of_symmetric_sample_is_zero() {
        assert_eq!(acceleration(&[1.0, 2.0, 3.0]), 0.0);
        assert!(acceleration(&[0.0, 0.0, 0.0, 3.0]) < 0.0);
    }
}
