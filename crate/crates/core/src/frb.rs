//! Fast and robust bootstrap.
//!
//! The MM- and S-estimates solve θ = g(θ) with
//! θ = (β̂, vec Γ̂, vec Σ̃, β̃). A bootstrap replicate evaluates g on a
//! resample at the original θ̂ (no re-estimation) and applies the linear
//! correction θ^{R*} = θ̂ + (I − ∇g(θ̂))⁻¹(g*(θ̂) − θ̂).
//!
//! Resamples are represented by case multiplicities, so g is a weighted
//! sum over the original observations.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{solve_general, Design};
use crate::error::{Result, SurError};
use crate::linalg::general_inverse;
use crate::rho::RhoSpec;
use crate::robust::RobustFit;

/// The FRB state vector (β̂, vec Γ̂, vec Σ̃, β̃); vec is column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub beta_hat: DVector<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
    pub beta_tilde: DVector<f64>,
}

impl ThetaVector {
    pub fn from_fit(fit: &RobustFit) -> Self {
        ThetaVector {
            beta_hat: fit.mm.beta.clone(),
            gamma_hat: fit.mm.shape.clone(),
            sigma_tilde: fit.s.sigma.clone(),
            beta_tilde: fit.s.beta.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn m(&self) -> usize {
        self.gamma_hat.nrows()
    }

    pub fn dim(&self) -> usize {
        theta_dim(self.k(), self.m())
    }

    pub fn pack(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(self.beta_hat.as_slice());
        v.extend_from_slice(self.gamma_hat.as_slice());
        v.extend_from_slice(self.sigma_tilde.as_slice());
        v.extend_from_slice(self.beta_tilde.as_slice());
        DVector::from_vec(v)
    }

    pub fn unpack(v: &DVector<f64>, k: usize, m: usize) -> Result<Self> {
        if v.len() != theta_dim(k, m) {
            return Err(SurError::DimensionMismatch(format!(
                "theta vector of length {} for k = {k}, m = {m}",
                v.len()
            )));
        }
        let m2 = m * m;
        let s = v.as_slice();
        Ok(ThetaVector {
            beta_hat: DVector::from_row_slice(&s[..k]),
            gamma_hat: DMatrix::from_column_slice(m, m, &s[k..k + m2]),
            sigma_tilde: DMatrix::from_column_slice(m, m, &s[k + m2..k + 2 * m2]),
            beta_tilde: DVector::from_row_slice(&s[k + 2 * m2..]),
        })
    }

    /// Column labels matching `pack`.
    pub fn labels(k: usize, m: usize) -> Vec<String> {
        let mut out: Vec<String> = (1..=k).map(|a| format!("beta_mm_{a}")).collect();
        for (tag, _) in [("gamma_mm", 0), ("sigma_s", 1)] {
            for b in 1..=m {
                for a in 1..=m {
                    out.push(format!("{tag}_{a}{b}"));
                }
            }
        }
        out.extend((1..=k).map(|a| format!("beta_s_{a}")));
        out
    }
}

pub fn theta_dim(k: usize, m: usize) -> usize {
    2 * k + 2 * m * m
}

/// ρ-functions and constants entering g.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrbModel {
    pub rho0: RhoSpec,
    pub rho1: RhoSpec,
    pub delta0: f64,
    pub diagonal: bool,
}

impl FrbModel {
    pub fn from_fit(fit: &RobustFit) -> Self {
        FrbModel { rho0: fit.tuning.rho0(), rho1: fit.tuning.rho1(), delta0: fit.tuning.delta0, diagonal: fit.diagonal }
    }
}

fn singular<T>(_: T) -> SurError {
    SurError::SingularResample
}

fn inv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    general_inverse(a).ok_or(SurError::SingularResample)
}

fn scale_sq(s: &DMatrix<f64>) -> Result<f64> {
    let det = s.determinant();
    if !(det > 0.0 && det.is_finite()) {
        return Err(SurError::SingularResample);
    }
    Ok(det.powf(1.0 / s.nrows() as f64))
}

fn mask(v: &mut DMatrix<f64>, diagonal: bool) {
    if diagonal {
        let m = v.nrows();
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    v[(a, b)] = 0.0;
                }
            }
        }
    }
}

fn quad(e: &[f64], a: &DMatrix<f64>) -> f64 {
    let m = e.len();
    let mut s = 0.0;
    for j in 0..m {
        for l in 0..m {
            s += e[j] * a[(j, l)] * e[l];
        }
    }
    s
}

/// Evaluate the fixed-point map g at θ on a sample given by case multiplicities.
pub fn g_eval(theta: &ThetaVector, design: &Design, counts: &[f64], model: &FrbModel) -> Result<ThetaVector> {
    let (n, m) = (design.n(), design.m());
    if counts.len() != n {
        return Err(SurError::DimensionMismatch("one multiplicity per observation required".into()));
    }
    let mf = m as f64;
    let ginv = inv(&theta.gamma_hat)?;
    let sinv = inv(&theta.sigma_tilde)?;
    let sig2 = scale_sq(&theta.sigma_tilde)?;

    let r1 = design.residuals(theta.beta_hat.as_slice());
    let w1: Vec<f64> = (0..n)
        .map(|i| {
            let d = (quad(&r1[i * m..(i + 1) * m], &ginv).max(0.0) / sig2).sqrt();
            counts[i] * model.rho1.weight(d)
        })
        .collect();
    let (u1, wv1) = design.normal_equations(&w1, &ginv);
    let g1 = solve_general(&u1, &wv1).map_err(singular)?;
    let mut v1 = design.weighted_scatter(&r1, &w1, model.diagonal);
    mask(&mut v1, model.diagonal);
    let det = v1.determinant();
    if !(det > 0.0 && det.is_finite()) {
        return Err(SurError::SingularResample);
    }
    let g2 = &v1 * det.powf(-1.0 / mf);

    let r0 = design.residuals(theta.beta_tilde.as_slice());
    let mut w0 = vec![0.0; n];
    let mut q = 0.0;
    for i in 0..n {
        let d = quad(&r0[i * m..(i + 1) * m], &sinv).max(0.0).sqrt();
        w0[i] = counts[i] * model.rho0.weight(d);
        q += counts[i] * (model.rho0.psi(d) * d - model.rho0.rho(d) + model.delta0);
    }
    if !(q > 0.0) {
        return Err(SurError::SingularResample);
    }
    let (u0, wv0) = design.normal_equations(&w0, &sinv);
    let g4 = solve_general(&u0, &wv0).map_err(singular)?;
    let v0 = design.weighted_scatter(&r0, &w0, model.diagonal);
    let g3 = v0 * (mf / q);
    Ok(ThetaVector { beta_hat: g1, gamma_hat: g2, sigma_tilde: g3, beta_tilde: g4 })
}

/// Analytic Jacobian ∇g(θ) on the sample given by `counts`.
pub fn grad_g(theta: &ThetaVector, design: &Design, counts: &[f64], model: &FrbModel) -> Result<DMatrix<f64>> {
    let (n, m, k) = (design.n(), design.m(), design.k());
    let m2 = m * m;
    let mf = m as f64;
    let dim = theta_dim(k, m);
    let (ob, og, os, ot) = (0, k, k + m2, k + 2 * m2);
    let ginv = inv(&theta.gamma_hat)?;
    let sinv = inv(&theta.sigma_tilde)?;
    let sinv_t = sinv.transpose();
    let sig2 = scale_sq(&theta.sigma_tilde)?;
    let rho0 = &model.rho0;
    let rho1 = &model.rho1;

    // MM part: weights, g1 and the residuals at g1.
    let e1 = design.residuals(theta.beta_hat.as_slice());
    let mut d1 = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    for i in 0..n {
        d1[i] = (quad(&e1[i * m..(i + 1) * m], &ginv).max(0.0) / sig2).sqrt();
        w1[i] = counts[i] * rho1.weight(d1[i]);
    }
    let (u1, wv1) = design.normal_equations(&w1, &ginv);
    let g1 = solve_general(&u1, &wv1).map_err(singular)?;
    let u1_inv = inv(&u1)?;
    let rr1 = design.residuals(g1.as_slice());

    let mut a1 = DMatrix::<f64>::zeros(k, dim);
    let mut dv = DMatrix::<f64>::zeros(m2, dim);
    let mut v1 = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        let c = counts[i];
        if c == 0.0 {
            continue;
        }
        let x = design.x_obs(i);
        let e = DVector::from_row_slice(&e1[i * m..(i + 1) * m]);
        let r = DVector::from_row_slice(&rr1[i * m..(i + 1) * m]);
        let u = &ginv * &e;
        let ut = ginv.transpose() * &e;
        let xg = x.transpose() * &ginv;
        let z = &xg * &r;
        let gr = &ginv * &r;
        let vb = x.transpose() * &u;
        let d = d1[i];
        let w = rho1.weight(d);
        let wd = rho1.weight_prime_over_u(d);
        // w(d_i) derivatives with respect to b, vec G and vec S.
        let cb = -wd / sig2;
        let cg = -wd / (2.0 * sig2);
        let cs = -wd * d * d / (2.0 * mf);
        for a in 0..k {
            for col in 0..k {
                a1[(a, ob + col)] += c * cb * z[a] * vb[col];
            }
            for bb in 0..m {
                for aa in 0..m {
                    let idx = aa + m * bb;
                    a1[(a, og + idx)] += c * (cg * z[a] * ut[aa] * u[bb] - w * xg[(a, aa)] * gr[bb]);
                    a1[(a, os + idx)] += c * cs * z[a] * sinv_t[(aa, bb)];
                }
            }
        }
        for bb in 0..m {
            for aa in 0..m {
                if model.diagonal && aa != bb {
                    continue;
                }
                let row = aa + m * bb;
                let eab = e[aa] * e[bb];
                v1[(aa, bb)] += c * w * eab;
                for col in 0..k {
                    dv[(row, ob + col)] += c * (eab * cb * vb[col] - w * (x[(aa, col)] * e[bb] + e[aa] * x[(bb, col)]));
                }
                for b2 in 0..m {
                    for a2 in 0..m {
                        let idx = a2 + m * b2;
                        dv[(row, og + idx)] += c * eab * cg * ut[a2] * u[b2];
                        dv[(row, os + idx)] += c * eab * cs * sinv_t[(a2, b2)];
                    }
                }
            }
        }
    }
    let j1 = &u1_inv * a1;
    let v1_det = v1.determinant();
    if !(v1_det > 0.0) {
        return Err(SurError::SingularResample);
    }
    let v1_inv_t = inv(&v1)?.transpose();
    let scale = v1_det.powf(-1.0 / mf);
    let mut phi = DMatrix::<f64>::identity(m2, m2);
    for r in 0..m2 {
        for c in 0..m2 {
            phi[(r, c)] -= v1.as_slice()[r] * v1_inv_t.as_slice()[c] / mf;
        }
    }
    let j2 = phi * dv * scale;

    // S part.
    let e0 = design.residuals(theta.beta_tilde.as_slice());
    let mut d0 = vec![0.0; n];
    let mut w0 = vec![0.0; n];
    let mut qsum = 0.0;
    for i in 0..n {
        d0[i] = quad(&e0[i * m..(i + 1) * m], &sinv).max(0.0).sqrt();
        w0[i] = counts[i] * rho0.weight(d0[i]);
        qsum += counts[i] * (rho0.psi(d0[i]) * d0[i] - rho0.rho(d0[i]) + model.delta0);
    }
    let (u0, wv0) = design.normal_equations(&w0, &sinv);
    let g4 = solve_general(&u0, &wv0).map_err(singular)?;
    let u0_inv = inv(&u0)?;
    let rr0 = design.residuals(g4.as_slice());
    let mut a4 = DMatrix::<f64>::zeros(k, dim);
    let mut dv0 = DMatrix::<f64>::zeros(m2, dim);
    let mut dq = DVector::<f64>::zeros(dim);
    let mut v0 = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        let c = counts[i];
        if c == 0.0 {
            continue;
        }
        let x = design.x_obs(i);
        let e = DVector::from_row_slice(&e0[i * m..(i + 1) * m]);
        let r = DVector::from_row_slice(&rr0[i * m..(i + 1) * m]);
        let u = &sinv * &e;
        let ut = &sinv_t * &e;
        let xs = x.transpose() * &sinv;
        let z = &xs * &r;
        let sr = &sinv * &r;
        let vb = x.transpose() * &u;
        let d = d0[i];
        let w = rho0.weight(d);
        let wd = rho0.weight_prime_over_u(d);
        let pp = rho0.psi_prime(d);
        for col in 0..k {
            dq[ot + col] -= c * pp * vb[col];
        }
        for b2 in 0..m {
            for a2 in 0..m {
                dq[os + a2 + m * b2] -= c * 0.5 * pp * ut[a2] * u[b2];
            }
        }
        for a in 0..k {
            for col in 0..k {
                a4[(a, ot + col)] -= c * wd * z[a] * vb[col];
            }
            for bb in 0..m {
                for aa in 0..m {
                    let idx = aa + m * bb;
                    a4[(a, os + idx)] += c * (-0.5 * wd * z[a] * ut[aa] * u[bb] - w * xs[(a, aa)] * sr[bb]);
                }
            }
        }
        for bb in 0..m {
            for aa in 0..m {
                if model.diagonal && aa != bb {
                    continue;
                }
                let row = aa + m * bb;
                let eab = e[aa] * e[bb];
                v0[(aa, bb)] += c * w * eab;
                for col in 0..k {
                    dv0[(row, ot + col)] -= c * (eab * wd * vb[col] + w * (x[(aa, col)] * e[bb] + e[aa] * x[(bb, col)]));
                }
                for b2 in 0..m {
                    for a2 in 0..m {
                        dv0[(row, os + a2 + m * b2)] -= c * 0.5 * eab * wd * ut[a2] * u[b2];
                    }
                }
            }
        }
    }
    if !(qsum > 0.0) {
        return Err(SurError::SingularResample);
    }
    let j4 = &u0_inv * a4;
    let vv0 = DVector::from_column_slice(v0.as_slice());
    let j3 = dv0 * (mf / qsum) - (vv0 * dq.transpose()) * (mf / (qsum * qsum));

    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    jac.view_mut((ob, 0), (k, dim)).copy_from(&j1);
    jac.view_mut((og, 0), (m2, dim)).copy_from(&j2);
    jac.view_mut((os, 0), (m2, dim)).copy_from(&j3);
    jac.view_mut((ot, 0), (k, dim)).copy_from(&j4);
    Ok(jac)
}

/// (I − ∇g(θ̂))⁻¹ with a 1-norm condition estimate of I − ∇g.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionMatrix {
    pub matrix: DMatrix<f64>,
    pub cond_estimate: f64,
}

impl CorrectionMatrix {
    pub fn new(jac: &DMatrix<f64>) -> Result<Self> {
        let dim = jac.nrows();
        let a = DMatrix::<f64>::identity(dim, dim) - jac;
        let matrix = general_inverse(&a)
            .ok_or_else(|| SurError::NumericFailure("I - grad g is singular".into()))?;
        let norm1 = |x: &DMatrix<f64>| x.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let cond_estimate = norm1(&a) * norm1(&matrix);
        Ok(CorrectionMatrix { matrix, cond_estimate })
    }
}

/// Multiplicities of a case resample drawn from the stream (seed, replicate).
pub fn resample_indices(n: usize, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

pub fn counts_from_indices(n: usize, idx: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; n];
    for &i in idx {
        c[i] += 1.0;
    }
    c
}

/// FRB replicates of θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSet {
    pub seed: u64,
    /// Replicate number and θ^{R*} for every non-skipped resample.
    pub replicates: Vec<(usize, DVector<f64>)>,
    pub resample_indices: Vec<Vec<usize>>,
    pub skipped: Vec<usize>,
    pub warning: Option<String>,
    pub k: usize,
    pub m: usize,
}

impl ReplicateSet {
    pub fn n_effective(&self) -> usize {
        self.replicates.len()
    }

    /// Values of one θ coordinate across replicates.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.replicates.iter().map(|(_, v)| v[j]).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let labels = ThetaVector::labels(self.k, self.m);
        writeln!(out, "replicate,{}", labels.join(","))?;
        for (r, v) in &self.replicates {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            writeln!(out, "{r},{}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Skipped-replicate share above which a warning is attached.
pub const SKIP_WARNING_FRACTION: f64 = 0.05;

pub fn skip_warning(skipped: usize, total: usize) -> Option<String> {
    if total > 0 && skipped as f64 > SKIP_WARNING_FRACTION * total as f64 {
        Some(format!("degenerate bootstrap: {skipped} of {total} resamples were singular and skipped"))
    } else {
        None
    }
}

/// The fitted model together with its correction matrix.
#[derive(Debug, Clone)]
pub struct FrbEngine {
    pub design: Design,
    pub model: FrbModel,
    pub theta: ThetaVector,
    pub theta_vec: DVector<f64>,
    pub correction: CorrectionMatrix,
}

impl FrbEngine {
    pub fn new(design: &Design, fit: &RobustFit) -> Result<Self> {
        let model = FrbModel::from_fit(fit);
        let theta = ThetaVector::from_fit(fit);
        let ones = vec![1.0; design.n()];
        let jac = grad_g(&theta, design, &ones, &model).map_err(|e| match e {
            SurError::SingularResample => SurError::NumericFailure("gradient of g is singular at the fit".into()),
            other => other,
        })?;
        let correction = CorrectionMatrix::new(&jac)?;
        Ok(FrbEngine { design: design.clone(), model, theta_vec: theta.pack(), theta, correction })
    }

    /// One-step corrected replicate for the given case multiplicities.
    pub fn replicate_vec(&self, counts: &[f64]) -> Result<DVector<f64>> {
        let g = g_eval(&self.theta, &self.design, counts, &self.model)?.pack();
        let out = &self.theta_vec + &self.correction.matrix * (g - &self.theta_vec);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(SurError::SingularResample)
        }
    }

    pub fn replicate(&self, counts: &[f64]) -> Result<ThetaVector> {
        ThetaVector::unpack(&self.replicate_vec(counts)?, self.theta.k(), self.theta.m())
    }

    /// N case-resampling replicates; deterministic in (seed, N).
    pub fn replicates(&self, n_boot: usize, seed: u64) -> Result<ReplicateSet> {
        if n_boot == 0 {
            return Err(SurError::InvalidInput("number of bootstrap replicates must be positive".into()));
        }
        let n = self.design.n();
        let results: Vec<(Vec<usize>, Result<DVector<f64>>)> = (0..n_boot)
            .into_par_iter()
            .map(|r| {
                let idx = resample_indices(n, seed, r as u64);
                let counts = counts_from_indices(n, &idx);
                let v = self.replicate_vec(&counts);
                (idx, v)
            })
            .collect();
        let mut replicates = Vec::with_capacity(n_boot);
        let mut resample_indices = Vec::with_capacity(n_boot);
        let mut skipped = Vec::new();
        for (r, (idx, v)) in results.into_iter().enumerate() {
            resample_indices.push(idx);
            match v {
                Ok(v) => replicates.push((r, v)),
                Err(SurError::SingularResample) => skipped.push(r),
                Err(e) => return Err(e),
            }
        }
        let warning = skip_warning(skipped.len(), n_boot);
        Ok(ReplicateSet {
            seed,
            replicates,
            resample_indices,
            skipped,
            warning,
            k: self.theta.k(),
            m: self.theta.m(),
        })
    }

    /// One-step leave-one-out approximations of θ (None where singular).
    pub fn jackknife(&self) -> Vec<Option<DVector<f64>>> {
        let n = self.design.n();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut counts = vec![1.0; n];
                counts[i] = 0.0;
                self.replicate_vec(&counts).ok()
            })
            .collect()
    }
}
