mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use robsur::datasets::grunfeld;
use robsur::design::Design;
use robsur::frb::{FrbEngine, ThetaVector};
use robsur::inference::ci::{asymptotic_variance, ci_asymptotic};
use robsur::inference::hypothesis::{bootstrap_p_value, diagonality_null_design, scale_functional};
use robsur::inference::{empirical_constants, frb_intervals, lm_diag_test, lr_test_coef, CiMethod, TestOptions};
use robsur::robust::{fit_design, robust_fit};
use robsur::{AsymptoticConstants, Block, FitConfig, Restriction, Stage, SurDataset, TuningConstants};

use common::random_dataset;

fn opts(m: usize, n_bootstrap: usize, seed: u64) -> TestOptions {
    TestOptions {
        n_bootstrap,
        seed,
        tuning: TuningConstants::new(0.5, 0.9, m).unwrap(),
        fit: FitConfig { n_subsamples: 200, seed, ..Default::default() },
    }
}

fn scale_block(ds: &SurDataset, j: usize, a: f64) -> SurDataset {
    let blocks = ds
        .blocks()
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let y = if l == j { &b.response * a } else { b.response.clone() };
            Block::new(b.name.clone(), b.x.clone(), y).with_predictor_names(b.predictor_names.clone())
        })
        .collect();
    SurDataset::new(blocks).unwrap()
}

/// FRB replicates of Λ are linearizations and may fall below zero in small
/// samples, so p ≈ 1 is checked at a sample size where they rarely do.
#[test]
fn lambda_vanishes_when_restriction_holds_at_the_estimate() {
    let ds = random_dataset(400, &[2, 2], 0.4, 3);
    let o = opts(2, 200, 3);
    let f = robust_fit(&ds, &o.tuning, &o.fit).unwrap();
    let mut r = DMatrix::zeros(1, 4);
    r[(0, 1)] = 1.0;
    let q = DVector::from_element(1, f.s.beta[1]);
    let res = lr_test_coef(&ds, &Restriction::linear(r, q).unwrap(), Stage::S, &o).unwrap();
    assert!(res.statistic < 1e-6, "Λ_S = {}", res.statistic);
    assert!(res.p_bootstrap.unwrap() > 0.9);
    assert!(res.p_asymptotic > 0.99);
}

#[test]
fn statistics_are_nonnegative_and_p_values_bounded() {
    let ds = random_dataset(50, &[2, 2, 2], 0.5, 8);
    let o = opts(3, 100, 8);
    let mut r = DMatrix::zeros(1, 6);
    r[(0, 1)] = 1.0;
    r[(0, 3)] = -1.0;
    let restriction = Restriction::linear(r, DVector::zeros(1)).unwrap();
    for stage in [Stage::S, Stage::MM] {
        let results = [lr_test_coef(&ds, &restriction, stage, &o).unwrap(), lm_diag_test(&ds, stage, &o).unwrap()];
        for res in results {
            assert!(res.statistic >= 0.0);
            let nb = res.n_effective as f64;
            let p = res.p_bootstrap.unwrap();
            assert!(p >= 1.0 / (nb + 2.0) && p <= (nb + 1.0) / (nb + 2.0), "{p}");
            assert!(res.p_asymptotic > 0.0 && res.p_asymptotic <= 1.0);
            assert_eq!(res.n_effective + res.n_skipped, 100);
            assert_eq!(res.replicate_statistics.len(), res.n_effective);
        }
    }
}

proptest! {
    #[test]
    fn bootstrap_p_value_range(stat in -5.0f64..5.0, reps in proptest::collection::vec(-5.0f64..5.0, 1..200)) {
        let p = bootstrap_p_value(stat, &reps);
        let nb = reps.len() as f64;
        prop_assert!(p >= 1.0 / (nb + 2.0) && p <= (nb + 1.0) / (nb + 2.0));
    }
}

#[test]
fn tests_invariant_to_block_rescaling() {
    let ds = random_dataset(60, &[2, 2, 2], 0.5, 17);
    let scaled = scale_block(&ds, 1, 7.5);
    let o = opts(3, 0, 17);
    let mut r = DMatrix::zeros(1, 6);
    r[(0, 1)] = 1.0;
    let restriction = Restriction::linear(r, DVector::from_element(1, 1.3)).unwrap();
    for stage in [Stage::S, Stage::MM] {
        let a = lr_test_coef(&ds, &restriction, stage, &o).unwrap().statistic;
        let b = lr_test_coef(&scaled, &restriction, stage, &o).unwrap().statistic;
        assert!((a - b).abs() < 1e-6 * a.max(1.0), "Λ {stage:?}: {a} vs {b}");
        let a = lm_diag_test(&ds, stage, &o).unwrap().statistic;
        let b = lm_diag_test(&scaled, stage, &o).unwrap().statistic;
        assert!((a - b).abs() < 1e-6 * a.max(1.0), "LM {stage:?}: {a} vs {b}");
    }
}

#[test]
fn diagonality_null_data_has_identity_scatter() {
    for (n, seed) in [(200, 1u64), (300, 2), (400, 3)] {
        let ds = random_dataset(n, &[2, 3, 2], 0.6, seed);
        let o = opts(3, 0, seed);
        let design = Design::from_dataset(&ds);
        let full = fit_design(&design, &o.tuning, &o.fit, false, &[]).unwrap();
        for stage in [Stage::S, Stage::MM] {
            let null = diagonality_null_design(&design, &full, stage).unwrap();
            let refit = fit_design(&null, &o.tuning, &o.fit, false, &[]).unwrap();
            let sigma = match stage {
                Stage::S => &refit.s.sigma,
                Stage::MM => &refit.mm.sigma,
            };
            let dev = (sigma - DMatrix::<f64>::identity(3, 3)).amax();
            assert!(dev < 0.05, "n = {n}, {stage:?}: ‖Σ⁰ − I‖∞ = {dev}");
        }
    }
}

/// Central-difference gradient of the scale functional in the (β, Γ)
/// coordinates of the given stage, relative to the scale.
fn h_gradient_norm(design: &Design, theta: &ThetaVector, tuning: &TuningConstants, stage: Stage) -> f64 {
    let ones = vec![1.0; design.n()];
    let eval = |t: &ThetaVector| scale_functional(design, t, &ones, tuning, stage).unwrap();
    let base = eval(theta);
    let (k, m) = (theta.k(), theta.m());
    let mut sq = 0.0;
    for c in 0..k + m * m {
        let perturb = |t: &mut ThetaVector, step: Option<f64>| -> f64 {
            let (beta, mat) = match stage {
                Stage::S => (&mut t.beta_tilde, &mut t.sigma_tilde),
                Stage::MM => (&mut t.beta_hat, &mut t.gamma_hat),
            };
            let entry = if c < k { &mut beta[c] } else { &mut mat[((c - k) / m, (c - k) % m)] };
            let h = 1e-5 * entry.abs().max(1.0);
            if let Some(sign) = step {
                if c < k {
                    *entry += sign * h;
                } else {
                    let (a, b) = ((c - k) / m, (c - k) % m);
                    mat[(a, b)] += sign * h / 2.0;
                    mat[(b, a)] += sign * h / 2.0;
                }
            }
            h
        };
        let mut up = theta.clone();
        let mut down = theta.clone();
        let h = perturb(&mut up, Some(1.0));
        perturb(&mut down, Some(-1.0));
        let g = (eval(&up) - eval(&down)) / (2.0 * h) / base;
        sq += g * g;
    }
    sq.sqrt()
}

#[test]
fn scale_functional_is_stationary_at_the_fit() {
    for (sizes, seed) in [(&[2usize, 2][..], 4u64), (&[2, 3, 2][..], 5), (&[3, 2][..], 6)] {
        let ds = random_dataset(40, sizes, 0.5, seed);
        let t = TuningConstants::new(0.5, 0.9, sizes.len()).unwrap();
        let design = Design::from_dataset(&ds);
        let f = fit_design(&design, &t, &FitConfig { n_subsamples: 200, seed, ..Default::default() }, false, &[]).unwrap();
        let theta = ThetaVector::from_fit(&f);
        for stage in [Stage::S, Stage::MM] {
            let g = h_gradient_norm(&design, &theta, &t, stage);
            assert!(g < 1e-4, "{sizes:?} {stage:?}: gradient norm {g:e}");
        }
    }
}

fn grunfeld_fit(seed: u64) -> (SurDataset, robsur::RobustFit) {
    let ds = grunfeld().unwrap();
    let t = TuningConstants::new(0.5, 0.9, 3).unwrap();
    let f = robust_fit(&ds, &t, &FitConfig { n_subsamples: 1000, seed, ..Default::default() }).unwrap();
    (ds, f)
}

#[test]
fn grunfeld_asymptotic_interval_for_ge_capital() {
    let (ds, f) = grunfeld_fit(42);
    let design = Design::from_dataset(&ds);
    let k = empirical_constants(&f).unwrap();
    let ci = ci_asymptotic(&f, &design, &k, 0.95, &ds.coefficient_names()).unwrap();
    let c = &ci[2];
    assert_eq!(c.method, CiMethod::Asymptotic);
    assert!((c.lower - 0.117).abs() < 0.01 && (c.upper - 0.187).abs() < 0.01, "[{}, {}]", c.lower, c.upper);
}

#[test]
fn grunfeld_percentile_intervals_for_w_capital() {
    for seed in [1u64, 42] {
        let (ds, f) = grunfeld_fit(seed);
        let design = Design::from_dataset(&ds);
        let engine = FrbEngine::new(&design, &f).unwrap();
        let reps = engine.replicates(1000, seed).unwrap();
        let ci = frb_intervals(&engine, &reps, 0.95, &ds.coefficient_names()).unwrap();
        let bp = ci.iter().find(|c| c.index == 5 && c.method == CiMethod::Percentile).unwrap();
        let bca = ci.iter().find(|c| c.index == 5 && c.method == CiMethod::Bca).unwrap();
        assert!((bp.lower + 0.117).abs() < 0.03 && (bp.upper - 0.282).abs() < 0.03, "BP [{}, {}]", bp.lower, bp.upper);
        assert!((bca.lower + 0.123).abs() < 0.03 && (bca.upper - 0.280).abs() < 0.03, "BCa [{}, {}]", bca.lower, bca.upper);
        assert!(bp.contains(0.0) && bca.contains(0.0));
    }
}

/// Monte Carlo variance of β̂ on clean data against the normal-model ASV with
/// the exact design moment E[XᵀΣ⁻¹X] of `random_dataset`.
#[test]
fn monte_carlo_variance_matches_quadrature_asv() {
    let (n, sizes, corr) = (300, [2usize, 2], 0.5);
    let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
    let reps = 500;
    let betas: Vec<DVector<f64>> = (0..reps as u64)
        .map(|r| {
            let ds = random_dataset(n, &sizes, corr, 5000 + r);
            robust_fit(&ds, &t, &FitConfig { n_subsamples: 50, seed: r, ..Default::default() }).unwrap().mm.beta
        })
        .collect();
    let sigma = DMatrix::from_fn(2, 2, |a, b| (1.0 + a as f64) * (1.0 + b as f64) * if a == b { 1.0 } else { corr });
    let sinv = sigma.try_inverse().unwrap();
    // Columns: (block, predictor); intercepts correlate across blocks, slopes only with themselves.
    let cols = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let info = DMatrix::from_fn(4, 4, |u, v| {
        let ((j, a), (l, b)) = (cols[u], cols[v]);
        let moment = if a == 0 && b == 0 { 1.0 } else if j == l && a == b { 1.0 } else { 0.0 };
        sinv[(j, l)] * moment
    });
    let k = AsymptoticConstants::at_normal(&t.rho0(), &t.rho1(), 2).unwrap();
    let asv = info.try_inverse().unwrap() * k.asv_factor();
    for c in 0..4 {
        let mean = betas.iter().map(|b| b[c]).sum::<f64>() / reps as f64;
        let var = betas.iter().map(|b| (b[c] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let ratio = var * n as f64 / asv[(c, c)];
        assert!((ratio - 1.0).abs() < 0.15, "coefficient {c}: n·var / ASV = {ratio}");
    }
}

#[test]
fn empirical_asv_is_close_to_quadrature_on_clean_data() {
    let ds = random_dataset(300, &[2, 2], 0.5, 77);
    let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
    let design = Design::from_dataset(&ds);
    let f = fit_design(&design, &t, &FitConfig::default(), false, &[]).unwrap();
    let at_normal = AsymptoticConstants::at_normal(&t.rho0(), &t.rho1(), 2).unwrap();
    let emp = empirical_constants(&f).unwrap();
    let a = asymptotic_variance(&f, &design, &at_normal).unwrap();
    let b = asymptotic_variance(&f, &design, &emp).unwrap();
    for c in 0..4 {
        assert!((b[(c, c)] / a[(c, c)] - 1.0).abs() < 0.15);
    }
}
