mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robsur::classical::{gls, mle_fit};
use robsur::datasets::grunfeld;
use robsur::inference::{lm_test_mle, lr_test_mle, ClassicalOptions};
use robsur::{Block, Restriction, SurDataset};

use common::{grunfeld_equal_slopes, random_dataset};

const MLE_BETA: [f64; 9] = [-42.270, 0.049, 0.122, -3.684, 0.067, 0.018, -0.716, 0.016, 0.453];

#[test]
fn grunfeld_stacked_shape() {
    let s = grunfeld().unwrap().stack();
    assert_eq!(s.x.shape(), (60, 9));
    assert_eq!(s.ymat.shape(), (20, 3));
}

#[test]
fn grunfeld_mle_coefficients_and_covariance() {
    let fit = mle_fit(&grunfeld().unwrap(), 1e-10, 500).unwrap();
    for (k, want) in MLE_BETA.iter().enumerate() {
        assert!((fit.beta[k] - want).abs() <= 0.001, "β[{k}] = {} vs {want}", fit.beta[k]);
    }
    let s = &fit.sigma;
    let table = [(0, 0, 784.2), (0, 1, 224.2), (0, 2, 19.4), (1, 1, 97.8), (1, 2, 6.5), (2, 2, 1.0)];
    for (a, b, want) in table {
        assert!((s[(a, b)] - want).abs() <= 0.05, "Σ[{a},{b}] = {}", s[(a, b)]);
    }
    let r = |a: usize, b: usize| s[(a, b)] / (s[(a, a)] * s[(b, b)]).sqrt();
    for (a, b, want) in [(0, 1, 0.81), (0, 2, 0.69), (1, 2, 0.65)] {
        assert!((r(a, b) - want).abs() <= 0.005, "R[{a},{b}] = {}", r(a, b));
    }
    let diffs = fit.loglik_trace.windows(2).map(|w| w[1] - w[0]);
    assert!(diffs.into_iter().all(|d| d >= -1e-9));
}

#[test]
fn gls_at_the_mle_covariance_is_a_fixed_point() {
    let ds = grunfeld().unwrap();
    let fit = mle_fit(&ds, 1e-12, 1000).unwrap();
    let b = gls(&ds, &fit.sigma).unwrap();
    assert!((b - &fit.beta).amax() < 1e-10 * fit.beta.amax());
}

#[test]
fn mle_equivariant_under_blockwise_regressor_maps() {
    let ds = random_dataset(40, &[2, 3], 0.6, 9);
    let maps = [
        DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]),
        DMatrix::from_row_slice(3, 3, &[1.0, 0.5, -1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.5]),
    ];
    let blocks = ds
        .blocks()
        .iter()
        .zip(&maps)
        .map(|(b, a)| Block::new(b.name.clone(), &b.x * a, b.response.clone()))
        .collect();
    let mapped = SurDataset::new(blocks).unwrap();
    let f0 = mle_fit(&ds, 1e-12, 1000).unwrap();
    let f1 = mle_fit(&mapped, 1e-12, 1000).unwrap();
    let mut off = 0;
    for a in &maps {
        let p = a.nrows();
        let expected = a.clone().try_inverse().unwrap() * f0.beta.rows(off, p);
        assert!((expected - f1.beta.rows(off, p)).amax() < 1e-8);
        off += p;
    }
    assert!((f0.sigma - f1.sigma).amax() < 1e-8);
}

#[test]
fn diagonal_errors_give_vanishing_covariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 2000;
    let blocks = (0..3)
        .map(|j| {
            let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
            let y = DVector::from_fn(n, |i, _| 1.0 + x[(i, 1)] + rng.sample::<f64, _>(StandardNormal));
            Block::new(format!("b{j}"), x, y)
        })
        .collect();
    let fit = mle_fit(&SurDataset::new(blocks).unwrap(), 1e-10, 500).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                assert!(fit.sigma[(a, b)].abs() < 0.1);
            }
        }
    }
}

#[test]
fn grunfeld_classical_likelihood_ratio_test() {
    let ds = grunfeld().unwrap();
    let res = lr_test_mle(&ds, &grunfeld_equal_slopes(), &ClassicalOptions { n_bootstrap: 1000, seed: 42, ..Default::default() }).unwrap();
    assert_eq!(res.df, 2);
    assert!((res.statistic - 6.728).abs() <= 0.001, "Λ_MLE = {}", res.statistic);
    assert!((res.p_asymptotic - 0.035).abs() <= 0.001, "p = {}", res.p_asymptotic);
    let p = res.p_bootstrap.unwrap();
    assert!((p - 0.168).abs() <= 0.03, "bootstrap p = {p}");
}

#[test]
fn grunfeld_classical_breusch_pagan_statistic() {
    let res = lm_test_mle(&grunfeld().unwrap(), &ClassicalOptions::default()).unwrap();
    assert_eq!(res.df, 3);
    assert!((res.statistic - 23.482).abs() <= 0.001, "LM_MLE = {}", res.statistic);
    assert!(res.p_asymptotic < 0.001);
}

#[test]
fn classical_lambda_vanishes_when_restriction_holds_in_sample() {
    let ds = random_dataset(30, &[2, 2], 0.5, 1);
    let fit = mle_fit(&ds, 1e-12, 1000).unwrap();
    let mut r = DMatrix::zeros(1, 4);
    r[(0, 1)] = 1.0;
    r[(0, 3)] = -2.0;
    let q = DVector::from_element(1, fit.beta[1] - 2.0 * fit.beta[3]);
    let res = lr_test_mle(&ds, &Restriction::linear(r, q).unwrap(), &ClassicalOptions::default()).unwrap();
    assert!(res.statistic < 1e-8, "{}", res.statistic);
    assert!(res.p_asymptotic > 0.999);
}
