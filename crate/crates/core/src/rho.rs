//! Tukey bisquare ρ-function, its derivatives, consistency constants and
//! tuning for breakdown point and efficiency.
//!
//! All expectations are taken over the chi distribution with `m` degrees of
//! freedom (the norm of a standard normal vector in R^m). They are evaluated
//! with adaptive Gauss-Kronrod quadrature on `[0, c]`; beyond `c` the
//! bisquare is flat, so the tail contributes a closed-form mass.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SurError};
use crate::quadrature::integrate;
use crate::roots::brent;

const QUAD_TOL: f64 = 1e-13;
const TUNE_LO: f64 = 1e-3;
const TUNE_HI: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoFamily {
    Bisquare,
}

/// A bounded ρ-function with tuning constant `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSpec {
    pub c: f64,
    pub family: RhoFamily,
}

/// ρ, ψ = ρ', w = ψ/u and ψ' at a single point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEval {
    pub rho: f64,
    pub psi: f64,
    pub w: f64,
    pub psi_prime: f64,
}

impl RhoSpec {
    pub fn bisquare(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(SurError::InvalidInput(format!("tuning constant must be positive, got {c}")));
        }
        Ok(RhoSpec { c, family: RhoFamily::Bisquare })
    }

    /// Plateau value ρ(∞) = c²/6.
    #[inline]
    pub fn rho_max(&self) -> f64 {
        self.c * self.c / 6.0
    }

    #[inline]
    pub fn rho(&self, u: f64) -> f64 {
        let u = u.abs();
        if u >= self.c {
            return self.rho_max();
        }
        let t = u * u / (self.c * self.c);
        // u²/2 − u⁴/(2c²) + u⁶/(6c⁴), written in terms of t = (u/c)²
        0.5 * u * u * (1.0 - t + t * t / 3.0)
    }

    #[inline]
    pub fn psi(&self, u: f64) -> f64 {
        if u.abs() >= self.c {
            return 0.0;
        }
        let t = 1.0 - (u / self.c).powi(2);
        u * t * t
    }

    #[inline]
    pub fn weight(&self, u: f64) -> f64 {
        if u.abs() >= self.c {
            return 0.0;
        }
        let t = 1.0 - (u / self.c).powi(2);
        t * t
    }

    #[inline]
    pub fn psi_prime(&self, u: f64) -> f64 {
        if u.abs() >= self.c {
            return 0.0;
        }
        let t = (u / self.c).powi(2);
        1.0 - 6.0 * t + 5.0 * t * t
    }

    /// w'(u)/u, finite at the origin.
    #[inline]
    pub fn weight_prime_over_u(&self, u: f64) -> f64 {
        if u.abs() >= self.c {
            return 0.0;
        }
        let c2 = self.c * self.c;
        -4.0 / c2 * (1.0 - u * u / c2)
    }

    pub fn eval(&self, u: f64) -> RhoEval {
        RhoEval {
            rho: self.rho(u),
            psi: self.psi(u),
            w: self.weight(u),
            psi_prime: self.psi_prime(u),
        }
    }

    /// Smallest u ≥ 0 with ρ(u) = t, for 0 ≤ t ≤ ρ(∞).
    pub fn rho_inverse(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.rho_max()).contains(&t) {
            return Err(SurError::InvalidInput(format!("rho level {t} outside [0, c^2/6]")));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        if t == self.rho_max() {
            return Ok(self.c);
        }
        brent(|u| Ok(self.rho(u) - t), 0.0, self.c, 1e-15)
    }
}

/// Density of the chi distribution with `m` degrees of freedom.
pub fn chi_density(r: f64, m: usize) -> f64 {
    if r < 0.0 {
        return 0.0;
    }
    let mf = m as f64;
    let log_norm = (0.5 * mf - 1.0) * std::f64::consts::LN_2 + ln_gamma(0.5 * mf);
    if r == 0.0 {
        return if m == 1 { (-log_norm).exp() } else { 0.0 };
    }
    ((mf - 1.0) * r.ln() - 0.5 * r * r - log_norm).exp()
}

/// P(‖e‖ > c) for e ~ N_m(0, I).
pub fn chi_tail(c: f64, m: usize) -> f64 {
    let chi2 = ChiSquared::new(m as f64).expect("m >= 1");
    chi2.sf(c * c)
}

/// E[f(R) 1{R < c}] + tail · P(R ≥ c) for R ~ chi_m.
pub fn chi_expectation<F: Fn(f64) -> f64>(f: F, c: f64, tail: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(SurError::InvalidInput("m must be at least 1".into()));
    }
    // Beyond sqrt(m) + 40 the chi mass is below 1e-300.
    let upper = c.min((m as f64).sqrt() + 40.0);
    let body = integrate(|r| f(r) * chi_density(r, m), 0.0, upper, QUAD_TOL)?;
    let tail_mass = if tail == 0.0 { 0.0 } else { tail * chi_tail(c, m) };
    Ok(body + tail_mass)
}

/// δ = E[ρ(‖e‖)] for e ~ N_m(0, I).
pub fn consistency_delta(c: f64, m: usize) -> Result<f64> {
    let spec = RhoSpec::bisquare(c)?;
    chi_expectation(|r| spec.rho(r), c, spec.rho_max(), m)
}

/// Asymptotic breakdown point δ(c)/ρ(c) of the S-estimator.
pub fn breakdown_point(c: f64, m: usize) -> Result<f64> {
    let spec = RhoSpec::bisquare(c)?;
    Ok(consistency_delta(c, m)? / spec.rho_max())
}

/// Normal-model efficiency mη²/α of the location/regression estimator.
pub fn efficiency(c: f64, m: usize) -> Result<f64> {
    let spec = RhoSpec::bisquare(c)?;
    let (eta, alpha) = eta_alpha(&spec, m)?;
    Ok(m as f64 * eta * eta / alpha)
}

fn eta_alpha(spec: &RhoSpec, m: usize) -> Result<(f64, f64)> {
    let mf = m as f64;
    let eta = chi_expectation(
        |r| (1.0 - 1.0 / mf) * spec.weight(r) + spec.psi_prime(r) / mf,
        spec.c,
        0.0,
        m,
    )?;
    let alpha = chi_expectation(|r| spec.psi(r).powi(2), spec.c, 0.0, m)?;
    Ok((eta, alpha))
}

/// Tuning constant giving the requested asymptotic breakdown point.
pub fn tune_breakdown(eps_star: f64, m: usize) -> Result<f64> {
    if !(eps_star > 0.0 && eps_star <= 0.5) {
        return Err(SurError::InvalidInput(format!("breakdown point must lie in (0, 0.5], got {eps_star}")));
    }
    if m == 0 {
        return Err(SurError::InvalidInput("m must be at least 1".into()));
    }
    brent(|c| Ok(breakdown_point(c, m)? - eps_star), TUNE_LO, TUNE_HI, 1e-13)
}

/// Tuning constant giving the requested normal-model efficiency.
pub fn tune_efficiency(target_are: f64, m: usize) -> Result<f64> {
    if !(target_are > 0.0 && target_are < 1.0) {
        return Err(SurError::InvalidInput(format!("efficiency must lie in (0, 1), got {target_are}")));
    }
    if m == 0 {
        return Err(SurError::InvalidInput("m must be at least 1".into()));
    }
    brent(|c| Ok(efficiency(c, m)? - target_are), TUNE_LO, TUNE_HI, 1e-13)
}

/// The pair of ρ-functions used by the S- and MM-stages, with their
/// consistency constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConstants {
    pub c0: f64,
    pub c1: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub m: usize,
}

impl TuningConstants {
    /// Constants for the given breakdown point (S-stage) and efficiency (MM-stage).
    pub fn new(breakdown: f64, efficiency: f64, m: usize) -> Result<Self> {
        let c0 = tune_breakdown(breakdown, m)?;
        let c1 = tune_efficiency(efficiency, m)?;
        Self::from_constants(c0, c1, m)
    }

    pub fn from_constants(c0: f64, c1: f64, m: usize) -> Result<Self> {
        RhoSpec::bisquare(c0)?;
        RhoSpec::bisquare(c1)?;
        Ok(TuningConstants {
            c0,
            c1,
            delta0: consistency_delta(c0, m)?,
            delta1: consistency_delta(c1, m)?,
            m,
        })
    }

    pub fn rho0(&self) -> RhoSpec {
        RhoSpec { c: self.c0, family: RhoFamily::Bisquare }
    }

    pub fn rho1(&self) -> RhoSpec {
        RhoSpec { c: self.c1, family: RhoFamily::Bisquare }
    }
}

/// Constants of the influence functions and asymptotic variances.
///
/// Index 0 refers to the S-stage ρ-function and index 1 to the MM-stage.
/// `kappa` holds E[ψ(R)²R²], which enters σ₁ and the diagonality test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticConstants {
    pub m: usize,
    pub eta0: f64,
    pub eta1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    pub pi1: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

/// Which scale functional a test statistic is based on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S,
    MM,
}

impl AsymptoticConstants {
    /// Constants at the multivariate standard normal.
    pub fn at_normal(rho0: &RhoSpec, rho1: &RhoSpec, m: usize) -> Result<Self> {
        let mf = m as f64;
        let delta0 = chi_expectation(|r| rho0.rho(r), rho0.c, rho0.rho_max(), m)?;
        let (eta0, alpha0) = eta_alpha(rho0, m)?;
        let (eta1, alpha1) = eta_alpha(rho1, m)?;
        let gamma0 = chi_expectation(|r| rho0.psi(r) * r, rho0.c, 0.0, m)?;
        let gamma1 = chi_expectation(|r| rho1.psi(r) * r, rho1.c, 0.0, m)?;
        let kappa0 = chi_expectation(|r| (rho0.psi(r) * r).powi(2), rho0.c, 0.0, m)?;
        let kappa1 = chi_expectation(|r| (rho1.psi(r) * r).powi(2), rho1.c, 0.0, m)?;
        let pi1 = chi_expectation(
            |r| (mf + 1.0) * rho1.psi(r) * r + rho1.psi_prime(r) * r * r,
            rho1.c,
            0.0,
            m,
        )? / (mf + 2.0);
        let var_rho0 = chi_expectation(
            |r| (rho0.rho(r) - delta0).powi(2),
            rho0.c,
            (rho0.rho_max() - delta0).powi(2),
            m,
        )?;
        Ok(Self::assemble(m, eta0, eta1, gamma0, gamma1, alpha0, alpha1, kappa0, kappa1, pi1, var_rho0))
    }

    /// Plug-in constants from residual distances: `d0` are S-stage
    /// distances (standardized by Σ̃), `d1` MM-stage distances (by Σ̂).
    pub fn empirical(rho0: &RhoSpec, rho1: &RhoSpec, delta0: f64, m: usize, d0: &[f64], d1: &[f64]) -> Result<Self> {
        if d0.is_empty() || d1.is_empty() {
            return Err(SurError::InvalidInput("empty distance vector".into()));
        }
        let mf = m as f64;
        let mean = |d: &[f64], f: &dyn Fn(f64) -> f64| d.iter().map(|&x| f(x)).sum::<f64>() / d.len() as f64;
        let eta = |s: &RhoSpec, d: &[f64]| mean(d, &|r| (1.0 - 1.0 / mf) * s.weight(r) + s.psi_prime(r) / mf);
        let eta0 = eta(rho0, d0);
        let eta1 = eta(rho1, d1);
        let gamma0 = mean(d0, &|r| rho0.psi(r) * r);
        let gamma1 = mean(d1, &|r| rho1.psi(r) * r);
        let alpha0 = mean(d0, &|r| rho0.psi(r).powi(2));
        let alpha1 = mean(d1, &|r| rho1.psi(r).powi(2));
        let kappa0 = mean(d0, &|r| (rho0.psi(r) * r).powi(2));
        let kappa1 = mean(d1, &|r| (rho1.psi(r) * r).powi(2));
        let pi1 = mean(d1, &|r| (mf + 1.0) * rho1.psi(r) * r + rho1.psi_prime(r) * r * r) / (mf + 2.0);
        let var_rho0 = mean(d0, &|r| (rho0.rho(r) - delta0).powi(2));
        Ok(Self::assemble(m, eta0, eta1, gamma0, gamma1, alpha0, alpha1, kappa0, kappa1, pi1, var_rho0))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        m: usize,
        eta0: f64,
        eta1: f64,
        gamma0: f64,
        gamma1: f64,
        alpha0: f64,
        alpha1: f64,
        kappa0: f64,
        kappa1: f64,
        pi1: f64,
        var_rho0: f64,
    ) -> Self {
        let mf = m as f64;
        let sigma1 = mf / (pi1 * pi1 * (mf + 2.0)) * kappa1;
        let sigma2 = 4.0 / (gamma0 * gamma0) * var_rho0 - 2.0 / mf * sigma1;
        AsymptoticConstants {
            m,
            eta0,
            eta1,
            gamma0,
            gamma1,
            alpha0,
            alpha1,
            kappa0,
            kappa1,
            pi1,
            sigma1,
            sigma2,
        }
    }

    /// Efficiency mη₁²/α₁ of the MM regression estimator.
    pub fn are(&self) -> f64 {
        self.m as f64 * self.eta1 * self.eta1 / self.alpha1
    }

    /// Factor multiplying the asymptotic variance matrix E[XᵀΣ⁻¹X]⁻¹.
    pub fn asv_factor(&self) -> f64 {
        self.alpha1 / (self.m as f64 * self.eta1 * self.eta1)
    }

    /// Proportionality constant of the likelihood-ratio type statistic.
    pub fn lambda_factor(&self, stage: Stage) -> f64 {
        match stage {
            Stage::S => self.alpha0 / (self.eta0 * self.gamma0),
            Stage::MM => self.alpha1 / (self.eta1 * self.gamma1),
        }
    }

    /// Proportionality constant of the diagonality statistic.
    pub fn lm_factor(&self, stage: Stage) -> f64 {
        let mf = self.m as f64;
        match stage {
            Stage::S => mf * self.kappa0 / ((mf + 2.0) * self.gamma0 * self.gamma0),
            Stage::MM => mf * self.kappa1 / ((mf + 2.0) * self.gamma1 * self.gamma1),
        }
    }
}
