use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robsur::datasets::{grunfeld, grunfeld_years};
use robsur::design::Design;
use robsur::diagnostics::{
    chi_cutoff, classify_outliers, predictor_robust_distances, residual_distances, robust_location_scatter, Diagnostics, OutlierClass,
};
use robsur::robust::robust_fit;
use robsur::{Block, FitConfig, SurDataset, TuningConstants};

fn config(seed: u64) -> FitConfig {
    FitConfig { n_subsamples: 1000, seed, ..Default::default() }
}

fn diagnose(ds: &SurDataset, seed: u64, quantile: f64) -> Diagnostics {
    let t = TuningConstants::new(0.5, 0.9, ds.m()).unwrap();
    let f = robust_fit(ds, &t, &config(seed)).unwrap();
    let d = residual_distances(&Design::from_dataset(ds), &f.mm.beta, &f.mm.sigma).unwrap();
    let (rd, p_prime) = predictor_robust_distances(ds, 0.5, 0.9, &config(seed)).unwrap();
    classify_outliers(&d, &rd, ds.m(), p_prime, quantile).unwrap()
}

/// Rescale responses of block `j` by `a` and map every non-constant predictor
/// column x to s·x + t.
fn transform(ds: &SurDataset, j: usize, a: f64, s: f64, t: f64) -> SurDataset {
    let blocks = ds
        .blocks()
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let mut x = b.x.clone();
            for c in 0..x.ncols() {
                let col = x.column(c).into_owned();
                if col.iter().any(|v| *v != col[0]) {
                    x.set_column(c, &col.map(|v| s * v + t));
                }
            }
            let y = if l == j { &b.response * a } else { b.response.clone() };
            Block::new(b.name.clone(), x, y).with_predictor_names(b.predictor_names.clone())
        })
        .collect();
    SurDataset::new(blocks).unwrap()
}

#[test]
fn grunfeld_classification() {
    let ds = grunfeld().unwrap();
    let years = grunfeld_years();
    for seed in [1u64, 42] {
        let diag = diagnose(&ds, seed, 0.975);
        assert_eq!(diag.p_prime, 6);
        let year = |v: Vec<usize>| v.into_iter().map(|i| years[i]).collect::<Vec<_>>();
        let exceed: Vec<u32> =
            diag.records.iter().filter(|r| r.residual_distance > diag.residual_cutoff).map(|r| years[r.index]).collect();
        assert_eq!(exceed, vec![1946, 1947, 1948, 1954]);
        assert_eq!(year(diag.flagged(OutlierClass::VerticalOutlier)), vec![1946, 1947, 1948]);
        assert_eq!(year(diag.flagged(OutlierClass::BadLeverage)), vec![1954]);
        assert_eq!(diag.flagged(OutlierClass::GoodLeverage).len(), 1);
    }
}

#[test]
fn classification_invariant_to_rescaling_and_affine_predictors() {
    let ds = grunfeld().unwrap();
    let base = diagnose(&ds, 7, 0.975);
    let other = diagnose(&transform(&ds, 1, 0.01, 3.0, -250.0), 7, 0.975);
    for (a, b) in base.records.iter().zip(&other.records) {
        assert_eq!(a.class, b.class);
        assert!((a.residual_distance - b.residual_distance).abs() < 1e-6 * a.residual_distance.max(1.0));
        assert!((a.robust_distance - b.robust_distance).abs() < 1e-6 * a.robust_distance.max(1.0));
    }
}

#[test]
fn robust_distances_invariant_to_general_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = DMatrix::from_fn(80, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -1.0, 1.0, 0.3, 0.2, 0.0, 4.0]);
    let shift = DVector::from_vec(vec![10.0, -3.0, 0.5]);
    let mut za = &z * a.transpose();
    for mut row in za.row_iter_mut() {
        row += shift.transpose();
    }
    let rd = |z: &DMatrix<f64>| -> Vec<f64> {
        let (loc, scatter) = robust_location_scatter(z, 0.5, 0.9, &config(3)).unwrap();
        let inv = scatter.try_inverse().unwrap();
        z.row_iter()
            .map(|r| {
                let d = r.transpose() - &loc;
                d.dot(&(&inv * &d)).sqrt()
            })
            .collect()
    };
    // Subsampling is not affine equivariant, but the converged MM fixed point is.
    for (x, y) in rd(&z).iter().zip(rd(&za)) {
        assert!((x - y).abs() < 1e-6 * x.max(1.0), "{x} vs {y}");
    }
}

#[test]
fn mean_squared_robust_distance_matches_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 2000;
    let blocks: Vec<Block> = (0..2)
        .map(|j| {
            let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            Block::new(format!("b{j}"), x, y)
        })
        .collect();
    let ds = SurDataset::new(blocks).unwrap();
    let (rd, p_prime) = predictor_robust_distances(&ds, 0.5, 0.9, &config(1)).unwrap();
    assert_eq!(p_prime, 4);
    let mean = rd.iter().map(|r| r * r).sum::<f64>() / n as f64;
    assert!((mean / 4.0 - 1.0).abs() < 0.1, "mean RD² = {mean}");
}

#[test]
fn robust_distance_vanishes_at_the_center() {
    // Point-symmetric sample around c with a row at c: the location estimate is c.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = [3.0, -1.0];
    let half: Vec<[f64; 2]> = (0..30).map(|_| [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)]).collect();
    let mut rows = vec![c];
    for v in &half {
        rows.push([c[0] + v[0], c[1] + v[1]]);
        rows.push([c[0] - v[0], c[1] - v[1]]);
    }
    let z = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    let (loc, scatter) = robust_location_scatter(&z, 0.5, 0.9, &config(4)).unwrap();
    assert!((loc[0] - c[0]).abs() < 1e-6 && (loc[1] - c[1]).abs() < 1e-6, "{loc}");
    let d = z.row(0).transpose() - &loc;
    let rd = d.dot(&(scatter.try_inverse().unwrap() * &d)).sqrt();
    assert!(rd < 1e-6);
}

#[test]
fn residual_distance_trivial_cases() {
    let x = DMatrix::from_element(3, 1, 1.0);
    let ds = SurDataset::new(vec![
        Block::new("a", x.clone(), DVector::from_vec(vec![1.0, 4.0, 1.0])),
        Block::new("b", x, DVector::from_vec(vec![2.0, 2.0, -1.0])),
    ])
    .unwrap();
    let beta = DVector::from_vec(vec![1.0, 2.0]);
    let d = residual_distances(&Design::from_dataset(&ds), &beta, &DMatrix::identity(2, 2)).unwrap();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 3.0).abs() < 1e-12);
    assert!((d[2] - 3.0).abs() < 1e-12);
    let singular = DMatrix::from_element(2, 2, 1.0);
    assert!(residual_distances(&Design::from_dataset(&ds), &beta, &singular).is_err());
}

#[test]
fn csv_has_one_row_per_observation() {
    let diag = classify_outliers(&[0.5, 4.0, 0.1], &[0.2, 0.3, 9.0], 3, 2, 0.975).unwrap();
    let mut buf = Vec::new();
    diag.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("index,"));
    assert!(lines[2].contains("vertical_outlier"));
    assert!(lines[3].contains("good_leverage"));
}

proptest! {
    #[test]
    fn higher_quantile_never_flags_more(
        pairs in proptest::collection::vec((0.0f64..6.0, 0.0f64..6.0), 1..40),
        q1 in 0.5f64..0.99,
        dq in 0.0f64..0.009,
    ) {
        let (d, rd): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let low = classify_outliers(&d, &rd, 3, 4, q1).unwrap();
        let high = classify_outliers(&d, &rd, 3, 4, q1 + dq).unwrap();
        prop_assert!(high.residual_cutoff >= low.residual_cutoff);
        for (a, b) in low.records.iter().zip(&high.records) {
            if b.class != OutlierClass::Regular {
                prop_assert!(a.class != OutlierClass::Regular);
            }
            if b.residual_distance > high.residual_cutoff {
                prop_assert!(a.residual_distance > low.residual_cutoff);
            }
        }
    }

    #[test]
    fn cutoff_increases_with_quantile(df in 1usize..12, q in 0.5f64..0.98) {
        prop_assert!(chi_cutoff(df, q + 0.01).unwrap() > chi_cutoff(df, q).unwrap());
    }
}
