//! M-estimator of scale: the s > 0 solving Σ c_i ρ(d_i/s) / Σ c_i = δ.

use crate::error::{Result, SurError};
use crate::rho::RhoSpec;

/// Unweighted M-scale of nonnegative distances.
pub fn m_scale(d: &[f64], rho: &RhoSpec, delta: f64) -> Result<f64> {
    m_scale_weighted(d, None, rho, delta, 0.0)
}

/// M-scale with optional case multiplicities. Distances not exceeding
/// `zero_tol` count as exact fits.
pub fn m_scale_weighted(
    d: &[f64],
    counts: Option<&[f64]>,
    rho: &RhoSpec,
    delta: f64,
    zero_tol: f64,
) -> Result<f64> {
    if d.is_empty() {
        return Err(SurError::InvalidInput("no distances".into()));
    }
    if !(delta > 0.0 && delta < rho.rho_max()) {
        return Err(SurError::InvalidInput(format!("delta {delta} must lie in (0, rho(c))")));
    }
    if d.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(SurError::InvalidInput("distances must be finite and nonnegative".into()));
    }
    let cnt = |i: usize| counts.map_or(1.0, |c| c[i]);
    let total: f64 = (0..d.len()).map(cnt).sum();
    if !(total > 0.0) {
        return Err(SurError::InvalidInput("zero total weight".into()));
    }
    let zeros: f64 = (0..d.len()).filter(|&i| d[i] <= zero_tol).map(cnt).sum();
    let max_d = d.iter().cloned().fold(0.0, f64::max);
    let bdp = delta / rho.rho_max();
    if max_d <= zero_tol || zeros >= total * (1.0 - bdp) * (1.0 - 1e-12) {
        return Err(SurError::ExactFit(format!(
            "{zeros} of {total} residual distances vanish; the scale collapses to zero"
        )));
    }
    let f = |s: f64| -> (f64, f64) {
        let mut v = 0.0;
        let mut dv = 0.0;
        for (i, &x) in d.iter().enumerate() {
            let c = cnt(i);
            if c == 0.0 {
                continue;
            }
            let u = x / s;
            v += c * rho.rho(u);
            dv -= c * rho.psi(u) * u / s;
        }
        (v / total - delta, dv / total)
    };
    // At s_hi every standardized distance is below ρ⁻¹(δ), so f(s_hi) ≤ 0.
    let mut hi = max_d / rho.rho_inverse(delta)?;
    let mut lo = hi;
    let floor = (max_d * 1e-15).max(zero_tol);
    loop {
        lo *= 0.5;
        if f(lo).0 > 0.0 {
            break;
        }
        if lo < floor {
            return Err(SurError::ExactFit("scale collapses to zero".into()));
        }
        hi = lo;
    }
    // Safeguarded Newton iteration inside the bracket [lo, hi].
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (v, dv) = f(s);
        if v == 0.0 {
            return Ok(s);
        }
        if v > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let newton = s - v / dv;
        let next = if dv < 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - s).abs() <= 1e-15 * s || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(next);
        }
        s = next;
    }
    Err(SurError::NumericFailure("M-scale iteration did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rho::{consistency_delta, tune_breakdown};

    fn spec(m: usize) -> (RhoSpec, f64) {
        let c = tune_breakdown(0.5, m).unwrap();
        (RhoSpec::bisquare(c).unwrap(), consistency_delta(c, m).unwrap())
    }

    #[test]
    fn constant_distances() {
        let (r, delta) = spec(2);
        let s = m_scale(&[2.5; 10], &r, delta).unwrap();
        assert!((s - 2.5 / r.rho_inverse(delta).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constraint_satisfied() {
        let (r, delta) = spec(3);
        let d: Vec<f64> = (0..57).map(|i| ((i * 37 % 101) as f64) / 20.0).collect();
        let s = m_scale(&d, &r, delta).unwrap();
        let mean: f64 = d.iter().map(|x| r.rho(x / s)).sum::<f64>() / d.len() as f64;
        assert!((mean - delta).abs() < 1e-10);
    }

    #[test]
    fn scale_equivariant() {
        let (r, delta) = spec(1);
        let d: Vec<f64> = (1..30).map(|i| (i as f64).sqrt()).collect();
        let d2: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
        let s = m_scale(&d, &r, delta).unwrap();
        assert!((m_scale(&d2, &r, delta).unwrap() - 2.0 * s).abs() < 1e-12 * s);
    }

    #[test]
    fn counts_equal_duplication() {
        let (r, delta) = spec(2);
        let d = [0.3, 1.2, 2.2, 0.9, 4.0];
        let c = [2.0, 0.0, 1.0, 3.0, 1.0];
        let expanded = [0.3, 0.3, 2.2, 0.9, 0.9, 0.9, 4.0];
        let a = m_scale_weighted(&d, Some(&c), &r, delta, 0.0).unwrap();
        let b = m_scale(&expanded, &r, delta).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn majority_zero_is_exact_fit() {
        let (r, delta) = spec(1);
        let mut d = vec![0.0; 6];
        d.extend([1.0, 2.0, 3.0]);
        assert!(matches!(m_scale(&d, &r, delta), Err(SurError::ExactFit(_))));
        assert!(matches!(m_scale(&[0.0; 4], &r, delta), Err(SurError::ExactFit(_))));
    }
}
