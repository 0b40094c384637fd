//! Likelihood-ratio type tests for linear coefficient restrictions and
//! Breusch-Pagan type tests for a diagonal error covariance, in robust
//! (S/MM with FRB) and classical (Gaussian MLE) versions.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::classical::{mle_fit_design, ols_per_block, restricted_mle, residual_covariance, ClassicalFit};
use crate::data::SurDataset;
use crate::design::Design;
use crate::error::{Result, SurError};
use crate::frb::{counts_from_indices, resample_indices, skip_warning, FrbEngine, ThetaVector};
use crate::inference::ci::empirical_constants;
use crate::linalg::{correlation, inv_sqrt_spd, spd_inverse, symmetrize, unit_det};
use crate::restriction::{LinearConstraint, Restriction};
use crate::rho::{Stage, TuningConstants};
use crate::robust::{fit_design, improve_mm, m_scale_weighted, FitConfig, RobustFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    #[serde(rename = "Lambda_S")]
    LambdaS,
    #[serde(rename = "Lambda_MM")]
    LambdaMM,
    #[serde(rename = "Lambda_MLE")]
    LambdaMLE,
    #[serde(rename = "LM_S")]
    LmS,
    #[serde(rename = "LM_MM")]
    LmMM,
    #[serde(rename = "LM_MLE")]
    LmMLE,
}

impl TestKind {
    pub fn is_diagonality(&self) -> bool {
        matches!(self, TestKind::LmS | TestKind::LmMM | TestKind::LmMLE)
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            TestKind::LambdaS | TestKind::LmS => Some(Stage::S),
            TestKind::LambdaMM | TestKind::LmMM => Some(Stage::MM),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestKind::LambdaS => "Lambda_S",
            TestKind::LambdaMM => "Lambda_MM",
            TestKind::LambdaMLE => "Lambda_MLE",
            TestKind::LmS => "LM_S",
            TestKind::LmMM => "LM_MM",
            TestKind::LmMLE => "LM_MLE",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = SurError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lambda_s" => Ok(TestKind::LambdaS),
            "lambda_mm" => Ok(TestKind::LambdaMM),
            "lambda_mle" => Ok(TestKind::LambdaMLE),
            "lm_s" => Ok(TestKind::LmS),
            "lm_mm" => Ok(TestKind::LmMM),
            "lm_mle" => Ok(TestKind::LmMLE),
            other => Err(SurError::InvalidInput(format!("unknown test '{other}'"))),
        }
    }
}

/// Percentiles of the bootstrap null distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub mean: f64,
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl ReplicateSummary {
    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(s.len() - 1);
            s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
        };
        Some(ReplicateSummary {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p05: q(0.05),
            p25: q(0.25),
            p50: q(0.5),
            p75: q(0.75),
            p95: q(0.95),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    pub statistic: f64,
    /// Degrees of freedom of the asymptotic chi-squared law.
    pub df: usize,
    /// The statistic divided by this constant is asymptotically χ²_df.
    pub factor: f64,
    pub p_asymptotic: f64,
    pub p_bootstrap: Option<f64>,
    pub n_bootstrap: usize,
    pub n_effective: usize,
    pub n_skipped: usize,
    pub seed: u64,
    pub summary: Option<ReplicateSummary>,
    pub warning: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub replicate_statistics: Vec<f64>,
}

impl TestResult {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "replicate,statistic")?;
        for (r, v) in self.replicate_statistics.iter().enumerate() {
            writeln!(out, "{r},{v:e}")?;
        }
        Ok(())
    }
}

/// (#{T* > T} + 1) / (N + 2); ties count as non-exceedances.
pub fn bootstrap_p_value(statistic: f64, replicates: &[f64]) -> f64 {
    let exceed = replicates.iter().filter(|&&v| v > statistic).count();
    (exceed as f64 + 1.0) / (replicates.len() as f64 + 2.0)
}

fn chi2_sf(x: f64, df: usize) -> f64 {
    let chi = ChiSquared::new(df as f64).expect("df >= 1");
    chi.sf(x.max(0.0))
}

fn finish(
    test: TestKind,
    statistic: f64,
    df: usize,
    factor: f64,
    reps: Vec<Option<f64>>,
    n_boot: usize,
    seed: u64,
) -> TestResult {
    let valid: Vec<f64> = reps.iter().flatten().copied().collect();
    let n_skipped = n_boot - valid.len();
    let p_bootstrap = if n_boot > 0 && !valid.is_empty() { Some(bootstrap_p_value(statistic, &valid)) } else { None };
    TestResult {
        test,
        statistic,
        df,
        factor,
        p_asymptotic: chi2_sf(statistic / factor, df),
        p_bootstrap,
        n_bootstrap: n_boot,
        n_effective: valid.len(),
        n_skipped,
        seed,
        summary: ReplicateSummary::from_values(&valid),
        warning: if n_boot > 0 { skip_warning(n_skipped, n_boot) } else { None },
        replicate_statistics: valid,
    }
}

/// Options shared by the robust tests.
#[derive(Debug, Clone, PartialEq)]
pub struct TestOptions {
    pub n_bootstrap: usize,
    pub seed: u64,
    pub tuning: TuningConstants,
    pub fit: FitConfig,
}

/// Scale functional used by the likelihood-ratio type statistic.
///
/// On a (re)sample given by `counts`: s̃ is the M-scale of the distances
/// sqrt(e(β̃)ᵀ Γ̃⁻¹ e(β̃)) with Γ̃ = φ(Σ̃); for the MM version the efficient
/// scale σ̂ = s̃ sqrt(Σ c_i ρ₁(sqrt(e(β̂)ᵀ Γ̂⁻¹ e(β̂))/s̃) / (nδ₁)) is returned.
pub fn scale_functional(
    design: &Design,
    theta: &ThetaVector,
    counts: &[f64],
    tuning: &TuningConstants,
    stage: Stage,
) -> Result<f64> {
    let m = design.m();
    let gamma_s = unit_det(&symmetrize(&theta.sigma_tilde)).ok_or(SurError::SingularResample)?;
    let gs_inv = spd_inverse(&gamma_s).ok_or(SurError::SingularResample)?;
    let r0 = design.residuals(theta.beta_tilde.as_slice());
    let d0: Vec<f64> = design.quad_forms(&r0, &gs_inv).into_iter().map(|q| q.max(0.0).sqrt()).collect();
    let s = m_scale_weighted(&d0, Some(counts), &tuning.rho0(), tuning.delta0, 0.0).map_err(|_| SurError::SingularResample)?;
    if stage == Stage::S {
        return Ok(s);
    }
    let gamma = unit_det(&symmetrize(&theta.gamma_hat)).ok_or(SurError::SingularResample)?;
    let g_inv = spd_inverse(&gamma).ok_or(SurError::SingularResample)?;
    let r1 = design.residuals(theta.beta_hat.as_slice());
    let q1 = design.quad_forms(&r1, &g_inv);
    let rho1 = tuning.rho1();
    let total: f64 = counts.iter().sum();
    let mean: f64 = q1.iter().zip(counts).map(|(q, c)| c * rho1.rho(q.max(0.0).sqrt() / s)).sum::<f64>() / total;
    let _ = m;
    Ok(s * (mean / tuning.delta1).sqrt())
}

/// −2nm·log(s/s_r).
pub fn lambda_from_scales(n: f64, m: usize, full: f64, restricted: f64) -> f64 {
    -2.0 * n * m as f64 * (full / restricted).ln()
}

fn fit_scale(fit: &RobustFit, stage: Stage) -> f64 {
    match stage {
        Stage::S => fit.s.scale,
        Stage::MM => fit.mm.scale,
    }
}

fn stage_beta(fit: &RobustFit, stage: Stage) -> &DVector<f64> {
    match stage {
        Stage::S => &fit.s.beta,
        Stage::MM => &fit.mm.beta,
    }
}

/// Full and restricted fits for a linear restriction, with σ̃ ≤ σ̃_r and
/// σ̂ ≤ σ̂_r enforced by offering the restricted solution as a start.
pub struct LinearTestFits {
    pub design: Design,
    pub constraint: LinearConstraint,
    pub reduced: Design,
    pub full: RobustFit,
    pub restricted: RobustFit,
}

pub fn linear_test_fits(design: &Design, constraint: &LinearConstraint, tuning: &TuningConstants, config: &FitConfig) -> Result<LinearTestFits> {
    let reduced = design.reparametrize(&constraint.z, &constraint.beta0)?;
    let restricted = fit_design(&reduced, tuning, config, false, &[])?;
    let start_s = (constraint.expand(&restricted.s.beta), restricted.s.shape.clone());
    let mut full = fit_design(design, tuning, config, false, &[start_s])?;
    if full.mm.scale > restricted.mm.scale {
        let b = constraint.expand(&restricted.mm.beta);
        improve_mm(design, &mut full, &b, &restricted.mm.shape, config)?;
    }
    Ok(LinearTestFits { design: design.clone(), constraint: constraint.clone(), reduced, full, restricted })
}

/// Robust likelihood-ratio type test of Rβ = q with FRB p-value.
pub fn lr_test_coef(ds: &SurDataset, restriction: &Restriction, stage: Stage, opts: &TestOptions) -> Result<TestResult> {
    lr_test_design(&Design::from_dataset(ds), restriction, stage, opts)
}

pub fn lr_test_design(design: &Design, restriction: &Restriction, stage: Stage, opts: &TestOptions) -> Result<TestResult> {
    let Restriction::Linear { r, q } = restriction else {
        return Err(SurError::InvalidInput("likelihood-ratio test needs a linear restriction".into()));
    };
    if r.ncols() != design.k() {
        return Err(SurError::DimensionMismatch(format!("R has {} columns, model has {} coefficients", r.ncols(), design.k())));
    }
    let constraint = LinearConstraint::new(r, q)?;
    let fits = linear_test_fits(design, &constraint, &opts.tuning, &opts.fit)?;
    let (n, m) = (design.n(), design.m());
    let statistic = lambda_from_scales(n as f64, m, fit_scale(&fits.full, stage), fit_scale(&fits.restricted, stage)).max(0.0);
    let constants = empirical_constants(&fits.full)?;
    let factor = constants.lambda_factor(stage);
    let test = if stage == Stage::S { TestKind::LambdaS } else { TestKind::LambdaMM };
    if opts.n_bootstrap == 0 {
        return Ok(finish(test, statistic, r.nrows(), factor, vec![], 0, opts.seed));
    }

    // Null data: shift the responses so that the restricted fit becomes the truth.
    let delta = stage_beta(&fits.full, stage) - constraint.expand(stage_beta(&fits.restricted, stage));
    let design0 = design.shift_responses(&delta);
    let mut full0 = fits.full.clone();
    full0.s.beta -= &delta;
    full0.mm.beta -= &delta;
    let reduced0 = design0.reparametrize(&constraint.z, &constraint.beta0)?;
    let restricted0 = fit_design(&reduced0, &opts.tuning, &opts.fit, false, &[])?;
    let engine = FrbEngine::new(&design0, &full0)?;
    let engine_r = FrbEngine::new(&reduced0, &restricted0)?;
    let tuning = opts.tuning;
    let reps: Vec<Option<f64>> = (0..opts.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let counts = counts_from_indices(n, &resample_indices(n, opts.seed, b as u64));
            let th = engine.replicate(&counts).ok()?;
            let th_r = engine_r.replicate(&counts).ok()?;
            let s = scale_functional(&design0, &th, &counts, &tuning, stage).ok()?;
            let s_r = scale_functional(&reduced0, &th_r, &counts, &tuning, stage).ok()?;
            let v = lambda_from_scales(n as f64, m, s, s_r);
            v.is_finite().then_some(v)
        })
        .collect();
    Ok(finish(test, statistic, r.nrows(), factor, reps, opts.n_bootstrap, opts.seed))
}

/// n Σ_{j<k} r_jk² for weighted residual correlations.
pub fn lm_statistic(resid: &[f64], weights: &[f64], counts: Option<&[f64]>, m: usize) -> f64 {
    let n_obs = weights.len();
    let mut v = DMatrix::<f64>::zeros(m, m);
    let mut total = 0.0;
    for i in 0..n_obs {
        let c = counts.map_or(1.0, |c| c[i]);
        total += c;
        let w = c * weights[i];
        if w == 0.0 {
            continue;
        }
        let e = &resid[i * m..(i + 1) * m];
        for a in 0..m {
            for b in 0..m {
                v[(a, b)] += w * e[a] * e[b];
            }
        }
    }
    let mut s = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            let r = v[(a, b)] / (v[(a, a)] * v[(b, b)]).sqrt();
            s += r * r;
        }
    }
    total * s
}

/// LM statistic of a diagonal-restricted fit on its sample.
fn lm_of_theta(design: &Design, theta: &ThetaVector, counts: &[f64], tuning: &TuningConstants, stage: Stage) -> Result<f64> {
    let m = design.m();
    let (beta, sigma, rho) = match stage {
        Stage::S => (&theta.beta_tilde, symmetrize(&theta.sigma_tilde), tuning.rho0()),
        Stage::MM => {
            let det = theta.sigma_tilde.determinant();
            if !(det > 0.0) {
                return Err(SurError::SingularResample);
            }
            (&theta.beta_hat, symmetrize(&theta.gamma_hat) * det.powf(1.0 / m as f64), tuning.rho1())
        }
    };
    let sinv = spd_inverse(&sigma).ok_or(SurError::SingularResample)?;
    let r = design.residuals(beta.as_slice());
    let w: Vec<f64> = design.quad_forms(&r, &sinv).into_iter().map(|q| rho.weight(q.max(0.0).sqrt())).collect();
    let v = lm_statistic(&r, &w, Some(counts), m);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SurError::SingularResample)
    }
}

/// Null data for the diagonality test: X̃B + EΣ^{-1/2} from a full fit.
pub fn diagonality_null_design(design: &Design, fit: &RobustFit, stage: Stage) -> Result<Design> {
    let (beta, sigma) = match stage {
        Stage::S => (&fit.s.beta, &fit.s.sigma),
        Stage::MM => (&fit.mm.beta, &fit.mm.sigma),
    };
    Ok(design.transform_residuals(beta, &inv_sqrt_spd(sigma)?))
}

/// Robust Breusch-Pagan type test of a diagonal error covariance.
pub fn lm_diag_test(ds: &SurDataset, stage: Stage, opts: &TestOptions) -> Result<TestResult> {
    lm_diag_test_design(&Design::from_dataset(ds), stage, opts)
}

pub fn lm_diag_test_design(design: &Design, stage: Stage, opts: &TestOptions) -> Result<TestResult> {
    let (n, m) = (design.n(), design.m());
    if m < 2 {
        return Err(SurError::InvalidInput("the diagonality test needs at least two blocks".into()));
    }
    let restricted = fit_design(design, &opts.tuning, &opts.fit, true, &[])?;
    let ones = vec![1.0; n];
    let statistic = lm_of_theta(design, &ThetaVector::from_fit(&restricted), &ones, &opts.tuning, stage)?;
    let constants = empirical_constants(&restricted)?;
    let factor = constants.lm_factor(stage);
    let df = m * (m - 1) / 2;
    let test = if stage == Stage::S { TestKind::LmS } else { TestKind::LmMM };
    if opts.n_bootstrap == 0 {
        return Ok(finish(test, statistic, df, factor, vec![], 0, opts.seed));
    }
    let full = fit_design(design, &opts.tuning, &opts.fit, false, &[])?;
    let design0 = diagonality_null_design(design, &full, stage)?;
    let restricted0 = fit_design(&design0, &opts.tuning, &opts.fit, true, &[])?;
    let engine = FrbEngine::new(&design0, &restricted0)?;
    let tuning = opts.tuning;
    let reps: Vec<Option<f64>> = (0..opts.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let counts = counts_from_indices(n, &resample_indices(n, opts.seed, b as u64));
            let th = engine.replicate(&counts).ok()?;
            lm_of_theta(&design0, &th, &counts, &tuning, stage).ok()
        })
        .collect();
    Ok(finish(test, statistic, df, factor, reps, opts.n_bootstrap, opts.seed))
}

/// Options for the classical tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalOptions {
    pub n_bootstrap: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ClassicalOptions {
    fn default() -> Self {
        ClassicalOptions { n_bootstrap: 0, seed: 0, tol: 1e-10, max_iter: 500 }
    }
}

fn lambda_mle_stat(full: &ClassicalFit, restricted: &ClassicalFit, n: usize) -> f64 {
    (n as f64 * (restricted.sigma.determinant().ln() - full.sigma.determinant().ln())).max(0.0)
}

/// Gaussian likelihood-ratio test of Rβ = q with a full-refit bootstrap.
pub fn lr_test_mle(ds: &SurDataset, restriction: &Restriction, opts: &ClassicalOptions) -> Result<TestResult> {
    let Restriction::Linear { r, q } = restriction else {
        return Err(SurError::InvalidInput("likelihood-ratio test needs a linear restriction".into()));
    };
    if r.ncols() != ds.p() {
        return Err(SurError::DimensionMismatch(format!("R has {} columns, model has {} coefficients", r.ncols(), ds.p())));
    }
    let constraint = LinearConstraint::new(r, q)?;
    let n = ds.n();
    let full = crate::classical::mle_fit(ds, opts.tol, opts.max_iter)?;
    let restricted = restricted_mle(ds, &constraint, opts.tol, opts.max_iter)?;
    let statistic = lambda_mle_stat(&full, &restricted, n);
    let df = r.nrows();
    if opts.n_bootstrap == 0 {
        return Ok(finish(TestKind::LambdaMLE, statistic, df, 1.0, vec![], 0, opts.seed));
    }
    let design = Design::from_dataset(ds);
    let design0 = design.shift_responses(&(&full.beta - &restricted.beta));
    let reps: Vec<Option<f64>> = (0..opts.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(n, opts.seed, b as u64);
            let sample = design0.select(&idx);
            let f = mle_fit_design(&sample, None, opts.tol, opts.max_iter).ok()?;
            let reduced = sample.reparametrize(&constraint.z, &constraint.beta0).ok()?;
            let fr = mle_fit_design(&reduced, None, opts.tol, opts.max_iter).ok()?;
            Some(lambda_mle_stat(&f, &fr, n))
        })
        .collect();
    Ok(finish(TestKind::LambdaMLE, statistic, df, 1.0, reps, opts.n_bootstrap, opts.seed))
}

fn ols_lm(design: &Design, ds_template: &SurDataset) -> Result<f64> {
    let ds = ds_template.with_responses(&design.response_matrix())?;
    let (_, resid) = ols_per_block(&ds)?;
    let corr = correlation(&residual_covariance(&resid));
    let m = ds.m();
    let mut s = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            s += corr[(a, b)].powi(2);
        }
    }
    Ok(ds.n() as f64 * s)
}

/// Classical Breusch-Pagan test with a full-refit bootstrap on null data.
pub fn lm_test_mle(ds: &SurDataset, opts: &ClassicalOptions) -> Result<TestResult> {
    let m = ds.m();
    if m < 2 {
        return Err(SurError::InvalidInput("the diagonality test needs at least two blocks".into()));
    }
    let n = ds.n();
    let design = Design::from_dataset(ds);
    let statistic = ols_lm(&design, ds)?;
    let df = m * (m - 1) / 2;
    if opts.n_bootstrap == 0 {
        return Ok(finish(TestKind::LmMLE, statistic, df, 1.0, vec![], 0, opts.seed));
    }
    let full = crate::classical::mle_fit(ds, opts.tol, opts.max_iter)?;
    let design0 = design.transform_residuals(&full.beta, &inv_sqrt_spd(&full.sigma)?);
    let reps: Vec<Option<f64>> = (0..opts.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(n, opts.seed, b as u64);
            let sample = design0.select(&idx);
            let tmpl = ds.select_rows(&idx).ok()?;
            ols_lm(&sample, &tmpl).ok()
        })
        .collect();
    Ok(finish(TestKind::LmMLE, statistic, df, 1.0, reps, opts.n_bootstrap, opts.seed))
}

/// Dispatch on the test kind; `restriction` is ignored for diagonality tests.
pub fn run_test(ds: &SurDataset, kind: TestKind, restriction: Option<&Restriction>, opts: &TestOptions) -> Result<TestResult> {
    let need = || restriction.ok_or_else(|| SurError::InvalidInput("a linear restriction is required".into()));
    let classical = ClassicalOptions { n_bootstrap: opts.n_bootstrap, seed: opts.seed, ..Default::default() };
    match kind {
        TestKind::LambdaS => lr_test_coef(ds, need()?, Stage::S, opts),
        TestKind::LambdaMM => lr_test_coef(ds, need()?, Stage::MM, opts),
        TestKind::LambdaMLE => lr_test_mle(ds, need()?, &classical),
        TestKind::LmS => lm_diag_test(ds, Stage::S, opts),
        TestKind::LmMM => lm_diag_test(ds, Stage::MM, opts),
        TestKind::LmMLE => lm_test_mle(ds, &classical),
    }
}
