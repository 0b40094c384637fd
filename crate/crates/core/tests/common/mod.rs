#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robsur::{Block, SurDataset};

/// Norms of `draws` standard normal m-vectors.
pub fn chi_norms(m: usize, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| (0..m).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum::<f64>().sqrt())
        .collect()
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Bisection for an increasing function on [lo, hi].
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Random SUR data: block j has an intercept and p_j − 1 normal predictors,
/// correlated normal errors with per-block scale 1 + j.
pub fn random_dataset(n: usize, sizes: &[usize], corr: f64, seed: u64) -> SurDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sizes.len();
    let common: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let blocks = sizes
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
            let y = DVector::from_fn(n, |i, _| {
                let e = corr.sqrt() * common[i] + (1.0 - corr).sqrt() * rng.sample::<f64, _>(StandardNormal);
                (0..p).map(|c| x[(i, c)] * (1.0 + c as f64 * 0.5)).sum::<f64>() + e * (1.0 + j as f64)
            });
            Block::new(format!("b{j}"), x, y)
        })
        .collect();
    let _ = m;
    SurDataset::new(blocks).unwrap()
}

/// Replace the first `k` rows of every block by bad leverage points.
pub fn contaminate(ds: &SurDataset, k: usize) -> SurDataset {
    let blocks = ds
        .blocks()
        .iter()
        .map(|b| {
            let mut x = b.x.clone();
            let mut y = b.response.clone();
            for i in 0..k {
                for c in 1..x.ncols() {
                    x[(i, c)] = -8.0 + 0.1 * i as f64;
                }
                y[i] += 25.0 + i as f64;
            }
            Block::new(b.name.clone(), x, y).with_predictor_names(b.predictor_names.clone())
        })
        .collect();
    SurDataset::new(blocks).unwrap()
}

pub fn grunfeld_equal_slopes() -> robsur::Restriction {
    let mut r = DMatrix::zeros(2, 9);
    r[(0, 1)] = 1.0;
    r[(0, 4)] = -1.0;
    r[(1, 2)] = 1.0;
    r[(1, 5)] = -1.0;
    robsur::Restriction::linear(r, DVector::zeros(2)).unwrap()
}
