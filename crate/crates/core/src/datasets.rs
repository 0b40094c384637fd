//! Bundled example data.

use nalgebra::{DMatrix, DVector};

use crate::data::{Block, SurDataset};
use crate::error::{Result, SurError};

/// Raw CSV of the Grunfeld investment data for General Electric (GE),
/// Westinghouse (W) and Diamond Match (DM), 1935-1954.
pub const GRUNFELD_CSV: &str = include_str!("../data/grunfeld.csv");

pub const GRUNFELD_FIRMS: [&str; 3] = ["GE", "W", "DM"];

/// Years of the Grunfeld observations.
pub fn grunfeld_years() -> Vec<u32> {
    (1935..=1954).collect()
}

/// Grunfeld investment equations: Investment ~ 1 + Shares + Capital per firm.
pub fn grunfeld() -> Result<SurDataset> {
    let mut lines = GRUNFELD_CSV.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<_, _>>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| SurError::InvalidInput(format!("bundled data: {e}")))?;
    let col = |name: &str| -> Result<DVector<f64>> {
        let j = header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| SurError::InvalidInput(format!("bundled data lacks column {name}")))?;
        Ok(DVector::from_iterator(rows.len(), rows.iter().map(|r| r[j])))
    };
    let n = rows.len();
    let mut blocks = Vec::new();
    for firm in GRUNFELD_FIRMS {
        let shares = col(&format!("{firm}_Shares"))?;
        let capital = col(&format!("{firm}_Capital"))?;
        let x = DMatrix::from_fn(n, 3, |i, k| match k {
            0 => 1.0,
            1 => shares[i],
            _ => capital[i],
        });
        let names = vec!["Intercept".to_string(), "Shares".to_string(), "Capital".to_string()];
        blocks.push(Block::new(firm, x, col(&format!("{firm}_Investment"))?).with_predictor_names(names));
    }
    SurDataset::new(blocks)
}
