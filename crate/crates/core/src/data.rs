//! SUR datasets: blocks of (X_j, y_j) sharing the same n observations, and
//! their stacked / multivariate views.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurError};

/// One regression equation of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub response: DVector<f64>,
    pub x: DMatrix<f64>,
    pub predictor_names: Vec<String>,
}

impl Block {
    pub fn new(name: impl Into<String>, x: DMatrix<f64>, response: DVector<f64>) -> Self {
        let predictor_names = (0..x.ncols()).map(|k| format!("x{}", k + 1)).collect();
        Block { name: name.into(), response, x, predictor_names }
    }

    pub fn with_predictor_names(mut self, names: Vec<String>) -> Self {
        self.predictor_names = names;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurDataset {
    blocks: Vec<Block>,
    n: usize,
}

impl SurDataset {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(SurError::InvalidInput("dataset needs at least one block".into()));
        }
        let n = blocks[0].response.len();
        if n == 0 {
            return Err(SurError::InvalidInput("dataset has no observations".into()));
        }
        for (j, b) in blocks.iter().enumerate() {
            if b.response.len() != n || b.x.nrows() != n {
                return Err(SurError::DimensionMismatch(format!(
                    "block {} has {} responses and {} design rows, expected {n}",
                    j + 1,
                    b.response.len(),
                    b.x.nrows()
                )));
            }
            if b.x.ncols() == 0 {
                return Err(SurError::InvalidInput(format!("block {} has no predictors", j + 1)));
            }
            if b.x.ncols() >= n {
                return Err(SurError::InvalidInput(format!(
                    "block {} has {} predictors for {n} observations",
                    j + 1,
                    b.x.ncols()
                )));
            }
            if b.predictor_names.len() != b.x.ncols() {
                return Err(SurError::DimensionMismatch(format!(
                    "block {} has {} predictor names for {} columns",
                    j + 1,
                    b.predictor_names.len(),
                    b.x.ncols()
                )));
            }
            if b.x.iter().chain(b.response.iter()).any(|v| !v.is_finite()) {
                return Err(SurError::InvalidInput(format!("block {} contains non-finite values", j + 1)));
            }
        }
        Ok(SurDataset { blocks, n })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    /// Total number of regression coefficients.
    pub fn p(&self) -> usize {
        self.blocks.iter().map(|b| b.x.ncols()).sum()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.x.ncols()).collect()
    }

    /// Offset of each block's coefficients within β.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.m());
        let mut acc = 0;
        for b in &self.blocks {
            off.push(acc);
            acc += b.x.ncols();
        }
        off
    }

    /// Labels "block:predictor" for every coefficient.
    pub fn coefficient_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| b.predictor_names.iter().map(move |p| format!("{}:{}", b.name, p)))
            .collect()
    }

    /// n×m response matrix Y.
    pub fn response_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.m(), |i, j| self.blocks[j].response[i])
    }

    /// n×p matrix of all predictor columns side by side.
    pub fn xtilde(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.p());
        let mut off = 0;
        for b in &self.blocks {
            out.columns_mut(off, b.x.ncols()).copy_from(&b.x);
            off += b.x.ncols();
        }
        out
    }

    /// n×m matrix of residuals Y − X̃B for a stacked coefficient vector.
    pub fn residuals(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.m());
        let mut off = 0;
        for (j, b) in self.blocks.iter().enumerate() {
            let p = b.x.ncols();
            let fit = &b.x * beta.rows(off, p);
            out.set_column(j, &(&b.response - fit));
            off += p;
        }
        out
    }

    /// Same design with a new n×m response matrix.
    pub fn with_responses(&self, y: &DMatrix<f64>) -> Result<Self> {
        if y.nrows() != self.n || y.ncols() != self.m() {
            return Err(SurError::DimensionMismatch("response matrix shape".into()));
        }
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(j, b)| Block { response: y.column(j).into_owned(), ..b.clone() })
            .collect();
        SurDataset::new(blocks)
    }

    /// Rows selected (with repetition allowed) by `idx`.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                name: b.name.clone(),
                response: DVector::from_iterator(idx.len(), idx.iter().map(|&i| b.response[i])),
                x: b.x.select_rows(idx),
                predictor_names: b.predictor_names.clone(),
            })
            .collect();
        SurDataset::new(blocks)
    }

    pub fn stack(&self) -> StackedForm {
        let (n, m, p) = (self.n, self.m(), self.p());
        let mut x = DMatrix::zeros(n * m, p);
        let mut y = DVector::zeros(n * m);
        let mut off = 0;
        for (j, b) in self.blocks.iter().enumerate() {
            x.view_mut((j * n, off), (n, b.x.ncols())).copy_from(&b.x);
            y.rows_mut(j * n, n).copy_from(&b.response);
            off += b.x.ncols();
        }
        StackedForm {
            x,
            y,
            xtilde: self.xtilde(),
            ymat: self.response_matrix(),
            block_sizes: self.block_sizes(),
            block_names: self.blocks.iter().map(|b| b.name.clone()).collect(),
            predictor_names: self.blocks.iter().map(|b| b.predictor_names.clone()).collect(),
        }
    }
}

/// The single-equation view: y = Xβ + ε with X block diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedForm {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub xtilde: DMatrix<f64>,
    pub ymat: DMatrix<f64>,
    pub block_sizes: Vec<usize>,
    pub block_names: Vec<String>,
    pub predictor_names: Vec<Vec<String>>,
}

impl StackedForm {
    /// Recover the block representation.
    pub fn unstack(&self) -> Result<SurDataset> {
        let m = self.block_sizes.len();
        if m == 0 || self.x.nrows() % m != 0 {
            return Err(SurError::DimensionMismatch("stacked rows not divisible by m".into()));
        }
        let n = self.x.nrows() / m;
        let mut off = 0;
        let mut blocks = Vec::with_capacity(m);
        for j in 0..m {
            let p = self.block_sizes[j];
            blocks.push(Block {
                name: self.block_names[j].clone(),
                x: self.x.view((j * n, off), (n, p)).into_owned(),
                response: self.y.rows(j * n, n).into_owned(),
                predictor_names: self.predictor_names[j].clone(),
            });
            off += p;
        }
        SurDataset::new(blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SurDataset {
        let x1 = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let x2 = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.0]);
        SurDataset::new(vec![
            Block::new("a", x1, DVector::from_vec(vec![1.0, 2.0, 2.5, 4.0])),
            Block::new("b", x2, DVector::from_vec(vec![0.0, 1.0, 0.3, 0.2])),
        ])
        .unwrap()
    }

    #[test]
    fn stacked_layout_has_zero_blocks() {
        let s = toy().stack();
        assert_eq!(s.x.shape(), (8, 3));
        assert_eq!(s.x.view((0, 1), (4, 2)).amax(), 0.0);
        assert_eq!(s.x.view((4, 0), (4, 1)).amax(), 0.0);
        assert_eq!(s.xtilde.shape(), (4, 3));
        assert_eq!(s.ymat.shape(), (4, 2));
    }

    #[test]
    fn stack_round_trip() {
        let d = toy();
        assert_eq!(d.stack().unstack().unwrap(), d);
    }

    #[test]
    fn single_block_stack_is_identity() {
        let x1 = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let d = SurDataset::new(vec![Block::new("a", x1.clone(), DVector::from_vec(vec![1.0, 2.0, 3.0]))]).unwrap();
        assert_eq!(d.stack().x, x1);
    }

    #[test]
    fn mismatched_rows_rejected() {
        let x1 = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let x2 = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let r = SurDataset::new(vec![
            Block::new("a", x1, DVector::from_vec(vec![1.0, 2.0, 3.0])),
            Block::new("b", x2, DVector::from_vec(vec![1.0, 2.0])),
        ]);
        assert!(matches!(r, Err(SurError::DimensionMismatch(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let x1 = DMatrix::from_row_slice(3, 1, &[1.0, f64::NAN, 3.0]);
        let r = SurDataset::new(vec![Block::new("a", x1, DVector::from_vec(vec![1.0, 2.0, 3.0]))]);
        assert!(matches!(r, Err(SurError::InvalidInput(_))));
    }
}
