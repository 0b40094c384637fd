mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use robsur::design::Design;
use robsur::robust::{fit_design, m_scale_weighted, robust_fit, shape_distances};
use robsur::{Block, FitConfig, SurDataset, TuningConstants};

use common::{contaminate, random_dataset};

fn config(seed: u64) -> FitConfig {
    FitConfig { n_subsamples: 200, seed, ..Default::default() }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (1.0 + y.abs())).fold(0.0, f64::max)
}

fn map_blocks(ds: &SurDataset, f: impl Fn(usize, &Block) -> Block) -> SurDataset {
    SurDataset::new(ds.blocks().iter().enumerate().map(|(j, b)| f(j, b)).collect()).unwrap()
}

#[test]
fn regression_equivariance() {
    let ds = random_dataset(40, &[2, 3], 0.5, 1);
    let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
    let fit = robust_fit(&ds, &t, &config(3)).unwrap();
    let shift = [vec![0.7, -2.0], vec![3.0, 0.1, -1.5]];
    let moved = map_blocks(&ds, |j, b| {
        let y = &b.response + &b.x * DVector::from_column_slice(&shift[j]);
        Block::new(b.name.clone(), b.x.clone(), y)
    });
    let fit2 = robust_fit(&moved, &t, &config(3)).unwrap();
    let flat: Vec<f64> = shift.concat();
    let expect_s: Vec<f64> = fit.s.beta.iter().zip(&flat).map(|(a, b)| a + b).collect();
    let expect_mm: Vec<f64> = fit.mm.beta.iter().zip(&flat).map(|(a, b)| a + b).collect();
    assert!(rel_diff(fit2.s.beta.as_slice(), &expect_s) < 1e-6);
    assert!(rel_diff(fit2.mm.beta.as_slice(), &expect_mm) < 1e-6);
    assert!((fit2.mm.scale - fit.mm.scale).abs() < 1e-6 * fit.mm.scale);
}

#[test]
fn blockwise_scale_equivariance() {
    let ds = random_dataset(40, &[2, 2, 2], 0.3, 2);
    let t = TuningConstants::new(0.5, 0.9, 3).unwrap();
    let fit = robust_fit(&ds, &t, &config(5)).unwrap();
    let a = [2.0, 0.5, 10.0];
    let scaled = map_blocks(&ds, |j, b| Block::new(b.name.clone(), b.x.clone(), &b.response * a[j]));
    let fit2 = robust_fit(&scaled, &t, &config(5)).unwrap();
    let sizes = ds.block_sizes();
    let mut k = 0;
    for (j, &p) in sizes.iter().enumerate() {
        for _ in 0..p {
            assert!((fit2.mm.beta[k] - a[j] * fit.mm.beta[k]).abs() < 1e-6 * (1.0 + fit2.mm.beta[k].abs()));
            k += 1;
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            let expect = a[i] * a[j] * fit.mm.sigma[(i, j)];
            assert!((fit2.mm.sigma[(i, j)] - expect).abs() < 1e-6 * (1.0 + expect.abs()));
        }
    }
    assert_eq!(fit.mm.weights.len(), fit2.mm.weights.len());
    assert!(rel_diff(&fit2.mm.weights, &fit.mm.weights) < 1e-6);
}

#[test]
fn within_block_affine_equivariance() {
    let ds = random_dataset(50, &[3, 2], 0.4, 3);
    let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
    let fit = robust_fit(&ds, &t, &config(1)).unwrap();
    let tr = [
        DMatrix::from_row_slice(3, 3, &[1.0, 0.5, -1.0, 0.0, 2.0, 0.3, 0.0, 0.1, 0.7]),
        DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 0.0, -3.0]),
    ];
    let moved = map_blocks(&ds, |j, b| Block::new(b.name.clone(), &b.x * &tr[j], b.response.clone()));
    let fit2 = robust_fit(&moved, &t, &config(1)).unwrap();
    let offs = ds.offsets();
    for (j, tj) in tr.iter().enumerate() {
        let p = tj.nrows();
        let b1 = fit.mm.beta.rows(offs[j], p).into_owned();
        let b2 = fit2.mm.beta.rows(offs[j], p).into_owned();
        let back = tj * b2;
        assert!(rel_diff(back.as_slice(), b1.as_slice()) < 1e-6, "block {j}");
    }
}

/// S-estimate of location for univariate data by direct minimization of the
/// M-scale over a fine grid followed by golden-section refinement.
fn s_location_oracle(y: &[f64], c: f64, delta: f64) -> (f64, f64) {
    let rho = robsur::RhoSpec::bisquare(c).unwrap();
    let scale_at = |mu: f64| {
        let r: Vec<f64> = y.iter().map(|v| (v - mu).abs()).collect();
        // Bisection on the monotone M-scale equation.
        let (mut lo, mut hi) = (1e-12_f64, 1e6_f64);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            let f = r.iter().map(|&d| rho.rho(d / mid)).sum::<f64>() / r.len() as f64 - delta;
            if f > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    };
    let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut best = (ymin, f64::INFINITY);
    let steps = 4000;
    for i in 0..=steps {
        let mu = ymin + (ymax - ymin) * i as f64 / steps as f64;
        let s = scale_at(mu);
        if s < best.1 {
            best = (mu, s);
        }
    }
    let h = (ymax - ymin) / steps as f64;
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if scale_at(x1) < scale_at(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let mu = 0.5 * (a + b);
    (mu, scale_at(mu))
}

#[test]
fn univariate_location_matches_direct_minimization() {
    let ds = random_dataset(60, &[1], 0.0, 8);
    let ds = contaminate(&ds, 8);
    let t = TuningConstants::new(0.5, 0.9, 1).unwrap();
    let fit = robust_fit(&ds, &t, &config(2)).unwrap();
    let y: Vec<f64> = ds.blocks()[0].response.iter().copied().collect();
    let (mu, s) = s_location_oracle(&y, t.c0, t.delta0);
    assert!((fit.s.beta[0] - mu).abs() < 1e-5 * (1.0 + mu.abs()), "{} vs {mu}", fit.s.beta[0]);
    assert!((fit.s.scale - s).abs() < 1e-6 * s, "{} vs {s}", fit.s.scale);
}

#[test]
fn s_scale_solves_m_scale_equation_and_beats_ols() {
    let ds = contaminate(&random_dataset(60, &[2, 3, 2], 0.5, 4), 6);
    let t = TuningConstants::new(0.5, 0.9, 3).unwrap();
    let design = Design::from_dataset(&ds);
    let fit = fit_design(&design, &t, &config(9), false, &[]).unwrap();
    let r0 = t.rho0();
    let mean = fit.s.distances.iter().map(|&d| r0.rho(d)).sum::<f64>() / 60.0;
    assert!((mean - t.delta0).abs() < 1e-8);
    assert!((fit.s.shape.determinant() - 1.0).abs() < 1e-8);
    assert!((fit.mm.shape.determinant() - 1.0).abs() < 1e-8);
    // Any other (β, Γ) has a larger M-scale; use OLS with identity shape.
    let (ols, _) = robsur::classical::ols_per_block(&ds).unwrap();
    let d = shape_distances(&design, &ols, &DMatrix::identity(3, 3)).unwrap();
    let s_ols = m_scale_weighted(&d, None, &r0, t.delta0, 0.0).unwrap();
    assert!(fit.s.scale <= s_ols);
}

#[test]
fn mm_objective_decreases_and_weights_in_unit_interval() {
    let ds = contaminate(&random_dataset(80, &[3, 3], 0.6, 5), 8);
    let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
    let fit = robust_fit(&ds, &t, &config(4)).unwrap();
    assert!(fit.s.converged && fit.mm.converged);
    for w in fit.mm.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    assert!(fit.mm.weights.iter().chain(&fit.s.weights).all(|&w| (0.0..=1.0).contains(&w)));
    // Leverage points get zero S-weight.
    assert!(fit.s.weights[..8].iter().all(|&w| w == 0.0));
    assert!(fit.mm.scale >= fit.s.scale * 0.5);
}

#[test]
fn fits_are_deterministic_in_seed() {
    let ds = random_dataset(40, &[2, 2], 0.5, 6);
    let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
    let a = robust_fit(&ds, &t, &config(17)).unwrap();
    let b = robust_fit(&ds, &t, &config(17)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn grunfeld_mm_estimates() {
    let ds = robsur::datasets::grunfeld().unwrap();
    let t = TuningConstants::new(0.5, 0.9, 3).unwrap();
    let fit = robust_fit(&ds, &t, &FitConfig { n_subsamples: 1000, seed: 1, ..Default::default() }).unwrap();
    let expect = [-30.6064, 0.0329, 0.1526, -6.3018, 0.0584, 0.1187, -0.8542, 0.0019, 0.6149];
    for (a, b) in fit.mm.beta.iter().zip(expect) {
        assert!((a - b).abs() < 1e-3 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert!((fit.s.scale - 3.730304).abs() < 1e-5);
    assert!((fit.mm.scale - 4.10262).abs() < 1e-4);
}

#[test]
fn diagonal_fit_has_diagonal_sigma() {
    let ds = random_dataset(50, &[2, 2, 2], 0.5, 7);
    let t = TuningConstants::new(0.5, 0.9, 3).unwrap();
    let fit = fit_design(&Design::from_dataset(&ds), &t, &config(1), true, &[]).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert_eq!(fit.mm.sigma[(i, j)], 0.0);
                assert_eq!(fit.s.sigma[(i, j)], 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn high_breakdown_resists_contamination(seed in 0u64..1000) {
        let clean = random_dataset(60, &[2, 2], 0.5, seed);
        let dirty = contaminate(&clean, 12);
        let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
        let fit = robust_fit(&dirty, &t, &config(seed)).unwrap();
        // True slopes are 1.5 in each block.
        prop_assert!((fit.mm.beta[1] - 1.5).abs() < 0.6);
        prop_assert!((fit.mm.beta[3] - 1.5).abs() < 1.2);
    }

    #[test]
    fn s_fixed_point_is_stationary(seed in 0u64..1000) {
        let ds = random_dataset(40, &[2, 3], 0.3, seed);
        let t = TuningConstants::new(0.5, 0.9, 2).unwrap();
        let design = Design::from_dataset(&ds);
        let fit = fit_design(&design, &t, &config(seed), false, &[]).unwrap();
        let (b, g, _) = robsur::robust::s_step(&design, &fit.s.beta, &fit.s.shape, &t.rho0(), t.delta0, false).unwrap();
        prop_assert!(rel_diff(b.as_slice(), fit.s.beta.as_slice()) < 1e-7);
        prop_assert!(rel_diff(g.as_slice(), fit.s.shape.as_slice()) < 1e-7);
    }
}
