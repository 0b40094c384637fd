//! Observation-wise regression design: each observation i carries an m×k
//! design matrix x_i and an m-vector response y_i, so that y_i = x_i β + e_i.
//!
//! A SUR dataset gives block-diagonal rows (row j of x_i is nonzero only in
//! the columns of block j); linearly restricted models give dense rows.
//! Sparsity is tracked per response coordinate as a contiguous column range.

use nalgebra::{DMatrix, DVector};

use crate::data::SurDataset;
use crate::error::{Result, SurError};

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    m: usize,
    k: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    support: Vec<(usize, usize)>,
    min_rows: usize,
}

impl Design {
    pub fn from_dataset(ds: &SurDataset) -> Self {
        let (n, m, k) = (ds.n(), ds.m(), ds.p());
        let mut x = vec![0.0; n * m * k];
        let mut y = vec![0.0; n * m];
        let mut support = Vec::with_capacity(m);
        let mut off = 0;
        for (j, b) in ds.blocks().iter().enumerate() {
            let p = b.x.ncols();
            support.push((off, off + p));
            for i in 0..n {
                y[i * m + j] = b.response[i];
                for a in 0..p {
                    x[(i * m + j) * k + off + a] = b.x[(i, a)];
                }
            }
            off += p;
        }
        let min_rows = ds.block_sizes().into_iter().max().unwrap_or(1);
        Design { n, m, k, x, y, support, min_rows }
    }

    /// Build directly from per-observation matrices.
    pub fn from_parts(xs: &[DMatrix<f64>], ys: &[DVector<f64>]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(SurError::DimensionMismatch("design and response counts differ".into()));
        }
        let (m, k) = xs[0].shape();
        let n = xs.len();
        let mut x = Vec::with_capacity(n * m * k);
        let mut y = Vec::with_capacity(n * m);
        for (xi, yi) in xs.iter().zip(ys) {
            if xi.shape() != (m, k) || yi.len() != m {
                return Err(SurError::DimensionMismatch("inconsistent observation shapes".into()));
            }
            for j in 0..m {
                for a in 0..k {
                    x.push(xi[(j, a)]);
                }
                y.push(yi[j]);
            }
        }
        Ok(Design { n, m, k, x, y, support: vec![(0, k); m], min_rows: k.div_ceil(m).max(1) })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn k(&self) -> usize {
        self.k
    }

    /// Rows needed by an elemental start (before the extra rows for Σ).
    pub fn min_rows(&self) -> usize {
        self.min_rows
    }

    #[inline]
    pub fn x_at(&self, i: usize, j: usize, a: usize) -> f64 {
        self.x[(i * self.m + j) * self.k + a]
    }

    #[inline]
    pub fn y_at(&self, i: usize, j: usize) -> f64 {
        self.y[i * self.m + j]
    }

    #[inline]
    pub fn support(&self, j: usize) -> (usize, usize) {
        self.support[j]
    }

    pub fn x_obs(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.k, &self.x[i * self.m * self.k..(i + 1) * self.m * self.k])
    }

    pub fn y_obs(&self, i: usize) -> DVector<f64> {
        DVector::from_row_slice(&self.y[i * self.m..(i + 1) * self.m])
    }

    /// Responses as an n×m matrix.
    pub fn response_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.m, &self.y)
    }

    /// Replace the responses (n×m).
    pub fn with_responses(&self, y: &DMatrix<f64>) -> Result<Self> {
        if y.shape() != (self.n, self.m) {
            return Err(SurError::DimensionMismatch("response matrix shape".into()));
        }
        let mut out = self.clone();
        for i in 0..self.n {
            for j in 0..self.m {
                out.y[i * self.m + j] = y[(i, j)];
            }
        }
        Ok(out)
    }

    /// Design x_i Z with responses y_i − x_i β⁰.
    pub fn reparametrize(&self, z: &DMatrix<f64>, beta0: &DVector<f64>) -> Result<Self> {
        if z.nrows() != self.k || beta0.len() != self.k {
            return Err(SurError::DimensionMismatch("restriction basis does not match design".into()));
        }
        let kr = z.ncols();
        let mut x = vec![0.0; self.n * self.m * kr];
        let mut y = self.y.clone();
        for i in 0..self.n {
            for j in 0..self.m {
                let (lo, hi) = self.support[j];
                let row = &self.x[(i * self.m + j) * self.k..(i * self.m + j + 1) * self.k];
                let mut shift = 0.0;
                for a in lo..hi {
                    shift += row[a] * beta0[a];
                }
                y[i * self.m + j] -= shift;
                for c in 0..kr {
                    let mut s = 0.0;
                    for a in lo..hi {
                        s += row[a] * z[(a, c)];
                    }
                    x[(i * self.m + j) * kr + c] = s;
                }
            }
        }
        Ok(Design {
            n: self.n,
            m: self.m,
            k: kr,
            x,
            y,
            support: vec![(0, kr); self.m],
            min_rows: self.min_rows,
        })
    }

    /// Responses y_i − x_i δ.
    pub fn shift_responses(&self, delta: &DVector<f64>) -> Self {
        let r = self.residuals(delta.as_slice());
        Design { y: r, ..self.clone() }
    }

    /// Responses x_i β + A e_i(β): residuals about β are mapped through A.
    pub fn transform_residuals(&self, beta: &DVector<f64>, a: &DMatrix<f64>) -> Self {
        let m = self.m;
        let r = self.residuals(beta.as_slice());
        let mut y = self.y.clone();
        for i in 0..self.n {
            for j in 0..m {
                let mut s = 0.0;
                for l in 0..m {
                    s += a[(j, l)] * r[i * m + l];
                }
                y[i * m + j] += s - r[i * m + j];
            }
        }
        Design { y, ..self.clone() }
    }

    /// Observations selected by `idx` (repetition allowed).
    pub fn select(&self, idx: &[usize]) -> Self {
        let mk = self.m * self.k;
        let mut x = Vec::with_capacity(idx.len() * mk);
        let mut y = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            x.extend_from_slice(&self.x[i * mk..(i + 1) * mk]);
            y.extend_from_slice(&self.y[i * self.m..(i + 1) * self.m]);
        }
        Design { n: idx.len(), x, y, ..self.clone() }
    }

    /// Residuals y_i − x_i β as a flat n·m vector (row i at [i*m..(i+1)*m]).
    pub fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                let (lo, hi) = self.support[j];
                let base = (i * self.m + j) * self.k;
                let mut s = self.y[i * self.m + j];
                for a in lo..hi {
                    s -= self.x[base + a] * beta[a];
                }
                out[i * self.m + j] = s;
            }
        }
        out
    }

    /// Residuals as an n×m matrix.
    pub fn residual_matrix(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.m, &self.residuals(beta.as_slice()))
    }

    /// Quadratic forms e_iᵀ A e_i for a (not necessarily symmetric) m×m A.
    pub fn quad_forms(&self, resid: &[f64], a: &DMatrix<f64>) -> Vec<f64> {
        let m = self.m;
        (0..resid.len() / m)
            .map(|i| {
                let e = &resid[i * m..(i + 1) * m];
                let mut s = 0.0;
                for j in 0..m {
                    let mut t = 0.0;
                    for l in 0..m {
                        t += a[(j, l)] * e[l];
                    }
                    s += e[j] * t;
                }
                s
            })
            .collect()
    }

    /// Weighted normal equations U = Σ w_i x_iᵀ A x_i and W = Σ w_i x_iᵀ A y_i.
    pub fn normal_equations(&self, w: &[f64], a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let (m, k) = (self.m, self.k);
        let mut u = vec![0.0; k * k];
        let mut wv = vec![0.0; k];
        for i in 0..self.n {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let xi = &self.x[i * m * k..(i + 1) * m * k];
            let yi = &self.y[i * m..(i + 1) * m];
            for j in 0..m {
                let (lo, hi) = self.support[j];
                let mut ty = 0.0;
                for l in 0..m {
                    ty += a[(j, l)] * yi[l];
                }
                ty *= wi;
                for c in lo..hi {
                    wv[c] += xi[j * k + c] * ty;
                }
                for l in 0..m {
                    let g = wi * a[(j, l)];
                    if g == 0.0 {
                        continue;
                    }
                    let (lo2, hi2) = self.support[l];
                    for c in lo..hi {
                        let xc = xi[j * k + c] * g;
                        if xc == 0.0 {
                            continue;
                        }
                        let urow = &mut u[c * k..(c + 1) * k];
                        for d in lo2..hi2 {
                            urow[d] += xc * xi[l * k + d];
                        }
                    }
                }
            }
        }
        (DMatrix::from_row_slice(k, k, &u), DVector::from_vec(wv))
    }

    /// Weighted generalized least squares β = U⁻¹W.
    pub fn weighted_gls(&self, w: &[f64], a: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (u, wv) = self.normal_equations(w, a);
        solve_normal(&u, &wv)
    }

    /// Σ w_i e_i e_iᵀ, optionally restricted to its diagonal.
    pub fn weighted_scatter(&self, resid: &[f64], w: &[f64], diagonal: bool) -> DMatrix<f64> {
        let m = self.m;
        let mut v = DMatrix::zeros(m, m);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let e = &resid[i * m..(i + 1) * m];
            for a in 0..m {
                if diagonal {
                    v[(a, a)] += wi * e[a] * e[a];
                } else {
                    for b in 0..m {
                        v[(a, b)] += wi * e[a] * e[b];
                    }
                }
            }
        }
        v
    }
}

/// Solve normal equations that need not be symmetric (partially pivoted LU).
pub fn solve_general(u: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let k = u.nrows();
    let max_diag = (0..k).map(|i| u[(i, i)].abs()).fold(0.0f64, f64::max);
    let lu = u.clone().lu();
    let uf = lu.u();
    for i in 0..k {
        if !(uf[(i, i)].abs() > 1e-12 * max_diag) {
            return Err(SurError::RankDeficient("weighted normal equations are singular".into()));
        }
    }
    lu.solve(w).ok_or_else(|| SurError::RankDeficient("weighted normal equations are singular".into()))
}

/// Solve symmetric normal equations, rejecting numerically singular systems.
pub fn solve_normal(u: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let k = u.nrows();
    let max_diag = (0..k).map(|i| u[(i, i)]).fold(0.0f64, f64::max);
    let chol = u
        .clone()
        .cholesky()
        .ok_or_else(|| SurError::RankDeficient("weighted normal equations are singular".into()))?;
    let l = chol.l_dirty();
    for i in 0..k {
        let piv = l[(i, i)] * l[(i, i)];
        if !(piv > 1e-12 * max_diag) {
            return Err(SurError::RankDeficient("weighted normal equations are singular".into()));
        }
    }
    Ok(chol.solve(w))
}
