//! S- and MM-estimation for SUR models, including restricted fits.
//!
//! The S-estimator minimizes |Σ| subject to an M-scale constraint on the
//! Mahalanobis residual distances. It is computed by elemental subsampling
//! followed by fixed-point iteration of its estimating equations. The
//! MM-estimator keeps the S-scale fixed and iterates the estimating
//! equations of a more efficient ρ-function from the S-solution.

mod mscale;

pub use mscale::{m_scale, m_scale_weighted};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurDataset;
use crate::design::Design;
use crate::error::{Result, SurError};
use crate::linalg::{is_well_conditioned_spd, max_abs, spd_inverse, symmetrize, unit_det};
use crate::restriction::{LinearConstraint, Restriction};
use crate::rho::{RhoSpec, TuningConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of elemental starting subsamples.
    pub n_subsamples: usize,
    /// Iteration cap for the fixed-point iterations.
    pub max_cstep: usize,
    /// Relative change in (β, Γ) below which iterations stop.
    pub tol: f64,
    /// Candidates iterated to convergence after the two initial steps.
    pub k_best: usize,
    pub seed: u64,
    /// Rows per elemental subsample; defaults to max p_j + m.
    pub subsample_size: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { n_subsamples: 500, max_cstep: 500, tol: 1e-10, k_best: 5, seed: 0, subsample_size: None }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subsamples == 0 {
            return Err(SurError::InvalidInput("n_subsamples must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(SurError::InvalidInput("tol must be positive".into()));
        }
        if self.k_best == 0 || self.max_cstep == 0 {
            return Err(SurError::InvalidInput("k_best and max_cstep must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SEstimate {
    pub beta: DVector<f64>,
    /// Σ̃ = σ̃²Γ̃.
    pub sigma: DMatrix<f64>,
    /// σ̃ = |Σ̃|^{1/(2m)}.
    pub scale: f64,
    /// Γ̃ with unit determinant.
    pub shape: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// d̃_i = sqrt(e_iᵀ Σ̃⁻¹ e_i).
    pub distances: Vec<f64>,
    /// |Σ̃|.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_candidates: usize,
    pub n_singular: usize,
    /// Scales of every fully iterated candidate, in candidate order.
    pub candidate_scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MMEstimate {
    pub beta: DVector<f64>,
    /// Γ̂ with unit determinant.
    pub shape: DMatrix<f64>,
    /// Σ̂ = σ̃²Γ̂.
    pub sigma: DMatrix<f64>,
    /// Efficient MM-scale σ̂.
    pub scale: f64,
    pub weights: Vec<f64>,
    /// d_i = sqrt(e_iᵀ Σ̂⁻¹ e_i).
    pub distances: Vec<f64>,
    /// (1/n) Σ ρ₁(d_i) at the solution.
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustFit {
    pub s: SEstimate,
    pub mm: MMEstimate,
    pub tuning: TuningConstants,
    pub diagonal: bool,
}

/// A fit under a restriction, with the model it was computed on.
#[derive(Debug, Clone)]
pub struct RestrictedFit {
    /// Design in the fit's own parametrization (reduced for linear restrictions).
    pub design: Design,
    pub constraint: Option<LinearConstraint>,
    pub fit: RobustFit,
    /// S and MM coefficients in the original parametrization.
    pub beta_s: DVector<f64>,
    pub beta_mm: DVector<f64>,
}

/// Typical residual size used to decide when a distance counts as zero.
fn zero_tolerance(design: &Design) -> f64 {
    let n = design.n();
    let mut log_sum = 0.0;
    for j in 0..design.m() {
        let mean = (0..n).map(|i| design.y_at(i, j)).sum::<f64>() / n as f64;
        let spread = (0..n).map(|i| (design.y_at(i, j) - mean).abs()).sum::<f64>() / n as f64;
        log_sum += spread.max(f64::MIN_POSITIVE).ln();
    }
    1e-10 * (log_sum / design.m() as f64).exp()
}

fn shape_inverse(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_inverse(gamma).ok_or_else(|| SurError::RegularizationFailure("shape matrix is not positive definite".into()))
}

/// Unit-determinant shape from a scatter matrix, halving the step towards
/// the previous shape when the update is not positive definite.
fn shape_update(v: &DMatrix<f64>, prev: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let v = symmetrize(v);
    if is_well_conditioned_spd(&v, 1e-14) {
        if let Some(g) = unit_det(&v) {
            return Ok(g);
        }
    }
    let tr_v = v.trace();
    if !(tr_v > 0.0 && tr_v.is_finite()) {
        return Err(SurError::RegularizationFailure("weighted scatter vanished".into()));
    }
    let vn = v * (prev.trace() / tr_v);
    let mut t = 1.0;
    for _ in 0..40 {
        t *= 0.5;
        let cand = prev * (1.0 - t) + &vn * t;
        if is_well_conditioned_spd(&cand, 1e-14) {
            if let Some(g) = unit_det(&cand) {
                return Ok(g);
            }
        }
    }
    Err(SurError::RegularizationFailure("shape update is not positive definite".into()))
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    let diff = new.iter().zip(old).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    diff / (1.0 + max_abs(old))
}

/// Distances sqrt(e_iᵀ Γ⁻¹ e_i) for coefficients β and shape Γ.
pub fn shape_distances(design: &Design, beta: &DVector<f64>, gamma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let ginv = shape_inverse(gamma)?;
    let r = design.residuals(beta.as_slice());
    Ok(design.quad_forms(&r, &ginv).into_iter().map(|q| q.max(0.0).sqrt()).collect())
}

/// One step of the S fixed-point map: returns the updated (β, Γ) and the
/// M-scale at the input point.
pub fn s_step(
    design: &Design,
    beta: &DVector<f64>,
    gamma: &DMatrix<f64>,
    rho0: &RhoSpec,
    delta0: f64,
    diagonal: bool,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    s_step_tol(design, beta, gamma, rho0, delta0, diagonal, zero_tolerance(design))
}

#[allow(clippy::too_many_arguments)]
fn s_step_tol(
    design: &Design,
    beta: &DVector<f64>,
    gamma: &DMatrix<f64>,
    rho0: &RhoSpec,
    delta0: f64,
    diagonal: bool,
    zero_tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let ginv = shape_inverse(gamma)?;
    let r = design.residuals(beta.as_slice());
    let dist: Vec<f64> = design.quad_forms(&r, &ginv).into_iter().map(|q| q.max(0.0).sqrt()).collect();
    let s = m_scale_weighted(&dist, None, rho0, delta0, zero_tol)?;
    let w: Vec<f64> = dist.iter().map(|d| rho0.weight(d / s)).collect();
    let new_beta = design.weighted_gls(&w, &ginv)?;
    let r2 = design.residuals(new_beta.as_slice());
    let v = design.weighted_scatter(&r2, &w, diagonal);
    let new_gamma = shape_update(&v, gamma)?;
    Ok((new_beta, new_gamma, s))
}

/// One step of the MM fixed-point map with the S-scale held at `scale`.
pub fn mm_step(
    design: &Design,
    beta: &DVector<f64>,
    gamma: &DMatrix<f64>,
    scale: f64,
    rho1: &RhoSpec,
    diagonal: bool,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let ginv = shape_inverse(gamma)?;
    let r = design.residuals(beta.as_slice());
    let d: Vec<f64> = design.quad_forms(&r, &ginv).into_iter().map(|q| q.max(0.0).sqrt() / scale).collect();
    let objective = d.iter().map(|&x| rho1.rho(x)).sum::<f64>() / d.len() as f64;
    let w: Vec<f64> = d.iter().map(|&x| rho1.weight(x)).collect();
    if w.iter().all(|&x| x == 0.0) {
        return Err(SurError::RegularizationFailure("all MM weights vanish".into()));
    }
    let new_beta = design.weighted_gls(&w, &ginv)?;
    let r2 = design.residuals(new_beta.as_slice());
    let v = design.weighted_scatter(&r2, &w, diagonal);
    let new_gamma = shape_update(&v, gamma)?;
    Ok((new_beta, new_gamma, objective))
}

struct Candidate {
    index: usize,
    beta: DVector<f64>,
    gamma: DMatrix<f64>,
    scale: f64,
}

fn elemental_start(design: &Design, idx: &[usize], diagonal: bool) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let sub = design.select(idx);
    let m = design.m();
    let beta = sub.weighted_gls(&vec![1.0; idx.len()], &DMatrix::identity(m, m)).ok()?;
    let r = sub.residuals(beta.as_slice());
    let v = sub.weighted_scatter(&r, &vec![1.0; idx.len()], diagonal) / idx.len() as f64;
    let gamma = if is_well_conditioned_spd(&v, 1e-12) {
        unit_det(&v).unwrap_or_else(|| DMatrix::identity(m, m))
    } else {
        DMatrix::identity(m, m)
    };
    Some((beta, gamma))
}

#[allow(clippy::too_many_arguments)]
fn iterate_s(
    design: &Design,
    mut beta: DVector<f64>,
    mut gamma: DMatrix<f64>,
    steps: usize,
    tol: Option<f64>,
    rho0: &RhoSpec,
    delta0: f64,
    diagonal: bool,
    zero_tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, usize, bool)> {
    for it in 1..=steps {
        let (b, g, _) = s_step_tol(design, &beta, &gamma, rho0, delta0, diagonal, zero_tol)?;
        let change = rel_change(b.as_slice(), beta.as_slice()).max(rel_change(g.as_slice(), gamma.as_slice()));
        beta = b;
        gamma = g;
        if let Some(t) = tol {
            if change < t {
                return Ok((beta, gamma, it, true));
            }
        }
    }
    Ok((beta, gamma, steps, tol.is_none()))
}

/// S-estimate on a general design.
///
/// `extra_starts` are additional (β, Γ) starting points that are always
/// iterated to convergence alongside the best subsample candidates.
pub fn s_estimate_design(
    design: &Design,
    tuning: &TuningConstants,
    config: &FitConfig,
    diagonal: bool,
    extra_starts: &[(DVector<f64>, DMatrix<f64>)],
) -> Result<SEstimate> {
    config.validate()?;
    let (n, m, k) = (design.n(), design.m(), design.k());
    if tuning.m != m {
        return Err(SurError::InvalidInput(format!("tuning constants are for m = {}, data has m = {m}", tuning.m)));
    }
    if n < k + m {
        return Err(SurError::DegenerateDesign(format!("n = {n} observations for {k} coefficients and m = {m}")));
    }
    let rho0 = tuning.rho0();
    let delta0 = tuning.delta0;
    let zero_tol = zero_tolerance(design);
    let h = config.subsample_size.unwrap_or(design.min_rows() + m).clamp(1, n);

    let results: Vec<Result<Option<Candidate>>> = (0..config.n_subsamples)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64);
            let idx = rand::seq::index::sample(&mut rng, n, h).into_vec();
            let Some((b0, g0)) = elemental_start(design, &idx, diagonal) else {
                return Ok(None);
            };
            match iterate_s(design, b0, g0, 2, None, &rho0, delta0, diagonal, zero_tol) {
                Ok((beta, gamma, _, _)) => {
                    let d = shape_distances(design, &beta, &gamma)?;
                    let scale = m_scale_weighted(&d, None, &rho0, delta0, zero_tol)?;
                    Ok(Some(Candidate { index: c, beta, gamma, scale }))
                }
                Err(SurError::ExactFit(msg)) => Err(SurError::ExactFit(msg)),
                Err(_) => Ok(None),
            }
        })
        .collect();
    let mut candidates = Vec::new();
    let mut n_singular = 0;
    for r in results {
        match r {
            Ok(Some(c)) => candidates.push(c),
            Ok(None) => n_singular += 1,
            Err(SurError::ExactFit(msg)) => return Err(SurError::ExactFit(msg)),
            Err(_) => n_singular += 1,
        }
    }
    if candidates.is_empty() && extra_starts.is_empty() {
        return Err(SurError::DegenerateDesign("every elemental subsample was singular".into()));
    }
    candidates.sort_by(|a, b| a.scale.total_cmp(&b.scale).then(a.index.cmp(&b.index)));
    candidates.truncate(config.k_best);
    for (e, (b, g)) in extra_starts.iter().enumerate() {
        let g = unit_det(&symmetrize(g))
            .ok_or_else(|| SurError::InvalidInput("starting shape is not positive definite".into()))?;
        candidates.push(Candidate { index: config.n_subsamples + e, beta: b.clone(), gamma: g, scale: f64::INFINITY });
    }

    let finals: Vec<Result<(usize, DVector<f64>, DMatrix<f64>, usize, bool, f64)>> = candidates
        .into_par_iter()
        .map(|c| {
            let (beta, gamma, it, conv) = iterate_s(
                design,
                c.beta,
                c.gamma,
                config.max_cstep,
                Some(config.tol),
                &rho0,
                delta0,
                diagonal,
                zero_tol,
            )?;
            let d = shape_distances(design, &beta, &gamma)?;
            let scale = m_scale_weighted(&d, None, &rho0, delta0, zero_tol)?;
            Ok((c.index, beta, gamma, it, conv, scale))
        })
        .collect();
    let mut best: Option<(usize, DVector<f64>, DMatrix<f64>, usize, bool, f64)> = None;
    let mut candidate_scales = Vec::new();
    let mut last_err = None;
    for f in finals {
        match f {
            Ok(c) => {
                candidate_scales.push(c.5);
                let better = match &best {
                    None => true,
                    Some(b) => c.5 < b.5 || (c.5 == b.5 && c.0 < b.0),
                };
                if better {
                    best = Some(c);
                }
            }
            Err(SurError::ExactFit(msg)) => return Err(SurError::ExactFit(msg)),
            Err(e) => last_err = Some(e),
        }
    }
    let Some((_, beta, gamma, iterations, converged, _)) = best else {
        return Err(last_err.unwrap_or_else(|| SurError::DegenerateDesign("no candidate converged".into())));
    };
    finish_s(design, beta, gamma, &rho0, delta0, zero_tol, iterations, converged, config.n_subsamples, n_singular, candidate_scales)
}

#[allow(clippy::too_many_arguments)]
fn finish_s(
    design: &Design,
    beta: DVector<f64>,
    gamma: DMatrix<f64>,
    rho0: &RhoSpec,
    delta0: f64,
    zero_tol: f64,
    iterations: usize,
    converged: bool,
    n_candidates: usize,
    n_singular: usize,
    candidate_scales: Vec<f64>,
) -> Result<SEstimate> {
    let m = design.m();
    let dg = shape_distances(design, &beta, &gamma)?;
    let scale = m_scale_weighted(&dg, None, rho0, delta0, zero_tol)?;
    let distances: Vec<f64> = dg.iter().map(|d| d / scale).collect();
    let weights = distances.iter().map(|&d| rho0.weight(d)).collect();
    let sigma = &gamma * (scale * scale);
    Ok(SEstimate {
        beta,
        sigma,
        scale,
        shape: gamma,
        weights,
        distances,
        objective: scale.powi(2 * m as i32),
        iterations,
        converged,
        n_candidates,
        n_singular,
        candidate_scales,
    })
}

/// MM-estimate on a general design, started from an S-estimate.
pub fn mm_estimate_design(
    design: &Design,
    s: &SEstimate,
    rho1: &RhoSpec,
    delta1: f64,
    config: &FitConfig,
    diagonal: bool,
) -> Result<MMEstimate> {
    mm_from_start(design, s.scale, s.beta.clone(), s.shape.clone(), rho1, delta1, config, diagonal)
}

#[allow(clippy::too_many_arguments)]
fn mm_from_start(
    design: &Design,
    scale: f64,
    mut beta: DVector<f64>,
    mut gamma: DMatrix<f64>,
    rho1: &RhoSpec,
    delta1: f64,
    config: &FitConfig,
    diagonal: bool,
) -> Result<MMEstimate> {
    if !(scale > 0.0) {
        return Err(SurError::InvalidInput("S-scale must be positive".into()));
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_cstep {
        let (b, g, obj) = mm_step(design, &beta, &gamma, scale, rho1, diagonal)?;
        trace.push(obj);
        let change = rel_change(b.as_slice(), beta.as_slice()).max(rel_change(g.as_slice(), gamma.as_slice()));
        beta = b;
        gamma = g;
        iterations = it;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let d: Vec<f64> = shape_distances(design, &beta, &gamma)?.into_iter().map(|x| x / scale).collect();
    let objective = d.iter().map(|&x| rho1.rho(x)).sum::<f64>() / d.len() as f64;
    trace.push(objective);
    let weights = d.iter().map(|&x| rho1.weight(x)).collect();
    let sigma = &gamma * (scale * scale);
    Ok(MMEstimate {
        beta,
        shape: gamma,
        sigma,
        scale: scale * (objective / delta1).sqrt(),
        weights,
        distances: d,
        objective,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Efficient MM-scale σ̂ = σ̃ · sqrt((1/(nδ₁)) Σ ρ₁(d_i)), with d_i the
/// MM residual distances standardized by σ̃.
pub fn mm_scale(s: &SEstimate, mm: &MMEstimate, rho1: &RhoSpec, delta1: f64) -> f64 {
    let mean = mm.distances.iter().map(|&d| rho1.rho(d)).sum::<f64>() / mm.distances.len() as f64;
    s.scale * (mean / delta1).sqrt()
}

/// S- then MM-estimate on a general design.
pub fn fit_design(
    design: &Design,
    tuning: &TuningConstants,
    config: &FitConfig,
    diagonal: bool,
    extra_starts: &[(DVector<f64>, DMatrix<f64>)],
) -> Result<RobustFit> {
    let s = s_estimate_design(design, tuning, config, diagonal, extra_starts)?;
    let mm = mm_estimate_design(design, &s, &tuning.rho1(), tuning.delta1, config, diagonal)?;
    Ok(RobustFit { s, mm, tuning: *tuning, diagonal })
}

/// Refit the MM stage from a different start, keeping it if the MM
/// objective improves.
pub fn improve_mm(design: &Design, fit: &mut RobustFit, beta: &DVector<f64>, gamma: &DMatrix<f64>, config: &FitConfig) -> Result<bool> {
    let rho1 = fit.tuning.rho1();
    let g = unit_det(&symmetrize(gamma)).ok_or_else(|| SurError::InvalidInput("starting shape is not positive definite".into()))?;
    let alt = mm_from_start(design, fit.s.scale, beta.clone(), g, &rho1, fit.tuning.delta1, config, fit.diagonal)?;
    if alt.objective < fit.mm.objective {
        fit.mm = alt;
        Ok(true)
    } else {
        Ok(false)
    }
}

pub fn s_estimate(ds: &SurDataset, config: &FitConfig, tuning: &TuningConstants) -> Result<SEstimate> {
    s_estimate_design(&Design::from_dataset(ds), tuning, config, false, &[])
}

pub fn mm_estimate(ds: &SurDataset, s: &SEstimate, tuning: &TuningConstants, config: &FitConfig) -> Result<MMEstimate> {
    mm_estimate_design(&Design::from_dataset(ds), s, &tuning.rho1(), tuning.delta1, config, false)
}

/// Unrestricted S- and MM-fit of a SUR dataset.
pub fn robust_fit(ds: &SurDataset, tuning: &TuningConstants, config: &FitConfig) -> Result<RobustFit> {
    fit_design(&Design::from_dataset(ds), tuning, config, false, &[])
}

/// Fit under a linear coefficient restriction or a diagonal Σ.
pub fn restricted_fit(
    ds: &SurDataset,
    restriction: &Restriction,
    tuning: &TuningConstants,
    config: &FitConfig,
) -> Result<RestrictedFit> {
    restricted_fit_design(&Design::from_dataset(ds), restriction, tuning, config)
}

pub fn restricted_fit_design(
    full: &Design,
    restriction: &Restriction,
    tuning: &TuningConstants,
    config: &FitConfig,
) -> Result<RestrictedFit> {
    match restriction {
        Restriction::Linear { r, q } => {
            if r.ncols() != full.k() {
                return Err(SurError::DimensionMismatch(format!(
                    "R has {} columns but the model has {} coefficients",
                    r.ncols(),
                    full.k()
                )));
            }
            let constraint = LinearConstraint::new(r, q)?;
            let design = full.reparametrize(&constraint.z, &constraint.beta0)?;
            let fit = fit_design(&design, tuning, config, false, &[])?;
            let beta_s = constraint.expand(&fit.s.beta);
            let beta_mm = constraint.expand(&fit.mm.beta);
            Ok(RestrictedFit { design, constraint: Some(constraint), fit, beta_s, beta_mm })
        }
        Restriction::DiagonalSigma => {
            let fit = fit_design(full, tuning, config, true, &[])?;
            let beta_s = fit.s.beta.clone();
            let beta_mm = fit.mm.beta.clone();
            Ok(RestrictedFit { design: full.clone(), constraint: None, fit, beta_s, beta_mm })
        }
    }
}
