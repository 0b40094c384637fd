//! Run configuration, dataset loading and restriction shorthand parsing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use robsur::sim::{ExperimentConfig, ScenarioSpec};
use robsur::{Block, FitConfig, Restriction, SurDataset, TuningConstants};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    S,
    Mm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    LevelPower,
    Coverage,
}

/// Settings of the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub experiment: Experiment,
    /// Test name (lambda_s, lambda_mm, lambda_mle, lm_s, lm_mm, lm_mle).
    pub test: String,
    pub grid: Vec<ScenarioSpec>,
    pub alpha: f64,
    /// Use the asymptotic p-value instead of the bootstrap one.
    pub asymptotic: Option<bool>,
    /// Directory with per-repetition files for resuming.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            experiment: Experiment::LevelPower,
            test: "lambda_mm".into(),
            grid: vec![ScenarioSpec::default()],
            alpha: 0.05,
            asymptotic: None,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// CSV path, or "grunfeld" for the bundled data.
    pub dataset: Option<String>,
    /// Block specifications "name: response ~ pred + pred"; `~ 1` is intercept only.
    pub blocks: Vec<String>,
    pub intercept: bool,
    pub estimator: Estimator,
    pub breakdown: f64,
    pub efficiency: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    pub n_subsamples: usize,
    pub k_best: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub level: f64,
    pub quantile: f64,
    /// Shorthand restrictions, one row each.
    pub restrict: Vec<String>,
    /// Explicit restriction matrix rows; combined with `q`.
    pub r: Option<Vec<Vec<f64>>>,
    pub q: Option<Vec<f64>>,
    pub output: Option<PathBuf>,
    /// CSV sidecar (replicates, diagnostic records or simulation cells).
    pub csv: Option<PathBuf>,
    pub threads: Option<usize>,
    pub simulation: SimulationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            blocks: vec![],
            intercept: true,
            estimator: Estimator::Mm,
            breakdown: 0.5,
            efficiency: 0.9,
            n_bootstrap: 1000,
            seed: 42,
            n_subsamples: 1000,
            k_best: 5,
            max_iter: 500,
            tol: 1e-10,
            level: 0.95,
            quantile: 0.975,
            restrict: vec![],
            r: None,
            q: None,
            output: None,
            csv: None,
            threads: None,
            simulation: SimulationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            n_subsamples: self.n_subsamples,
            max_cstep: self.max_iter,
            tol: self.tol,
            k_best: self.k_best,
            seed: self.seed,
            subsample_size: None,
        }
    }

    pub fn tuning(&self, m: usize) -> Result<TuningConstants, CliError> {
        Ok(TuningConstants::new(self.breakdown, self.efficiency, m)?)
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            breakdown: self.breakdown,
            efficiency: self.efficiency,
            fit: self.fit_config(),
            alpha: self.simulation.alpha,
            level: self.level,
            p_source: self.simulation.asymptotic.map(|a| {
                if a {
                    robsur::sim::PSource::Asymptotic
                } else {
                    robsur::sim::PSource::Bootstrap
                }
            }),
            output_dir: self.simulation.cache_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let unit = |v: f64, what: &str| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(CliError::Config(format!("{what} must lie in (0, 1), got {v}")))
            }
        };
        unit(self.level, "level")?;
        unit(self.quantile, "quantile")?;
        if !(self.breakdown > 0.0 && self.breakdown <= 0.5) {
            return Err(CliError::Config(format!("breakdown must lie in (0, 0.5], got {}", self.breakdown)));
        }
        unit(self.efficiency, "efficiency")?;
        self.fit_config().validate()?;
        Ok(())
    }
}

/// A parsed block specification.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub response: String,
    pub predictors: Vec<String>,
    pub intercept: bool,
}

pub fn parse_block_spec(spec: &str, default_intercept: bool) -> Result<BlockSpec, CliError> {
    let bad = || CliError::Config(format!("block spec '{spec}' is not of the form 'name: response ~ x1 + x2'"));
    let (name, rest) = spec.split_once(':').ok_or_else(bad)?;
    let (response, rhs) = rest.split_once('~').ok_or_else(bad)?;
    let (name, response) = (name.trim(), response.trim());
    if name.is_empty() || response.is_empty() {
        return Err(bad());
    }
    let mut intercept = default_intercept;
    let mut predictors = Vec::new();
    for term in rhs.split('+').map(str::trim).filter(|t| !t.is_empty()) {
        match term {
            "1" => intercept = true,
            "0" | "-1" => intercept = false,
            t => predictors.push(t.to_string()),
        }
    }
    if predictors.is_empty() && !intercept {
        return Err(CliError::Config(format!("block '{name}' has no regressors")));
    }
    Ok(BlockSpec { name: name.to_string(), response: response.to_string(), predictors, intercept })
}

/// Read a CSV file with a header row into named numeric columns.
pub fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    read_columns_from(&mut rdr)
}

pub fn read_columns_from<R: std::io::Read>(rdr: &mut csv::Reader<R>) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let header: Vec<String> = rdr.headers().map_err(|e| CliError::Config(format!("bad header: {e}")))?.iter().map(|h| h.trim().to_string()).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("row {}: {e}", r + 1)))?;
        if rec.len() != header.len() {
            return Err(CliError::Config(format!("row {} has {} fields, expected {}", r + 1, rec.len(), header.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Config(format!("row {}, column '{}': cannot parse '{}' as a number", r + 1, header[c], field))
            })?;
            cols[c].push(v);
        }
    }
    Ok((header, cols))
}

/// Build a dataset from named columns and block specifications.
pub fn build_dataset(header: &[String], cols: &[Vec<f64>], specs: &[BlockSpec]) -> Result<SurDataset, CliError> {
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let col = |name: &str| -> Result<&Vec<f64>, CliError> {
        index.get(name).map(|&i| &cols[i]).ok_or_else(|| CliError::Config(format!("missing column '{name}'")))
    };
    let mut blocks = Vec::with_capacity(specs.len());
    for s in specs {
        let y = col(&s.response)?;
        let n = y.len();
        let mut names = Vec::new();
        let mut columns: Vec<&Vec<f64>> = Vec::new();
        if s.intercept {
            names.push("Intercept".to_string());
        }
        for p in &s.predictors {
            columns.push(col(p)?);
            names.push(p.clone());
        }
        let k = names.len();
        let off = usize::from(s.intercept);
        let x = DMatrix::from_fn(n, k, |i, c| if c < off { 1.0 } else { columns[c - off][i] });
        blocks.push(Block::new(s.name.clone(), x, DVector::from_column_slice(y)).with_predictor_names(names));
    }
    Ok(SurDataset::new(blocks)?)
}

/// Dataset named by the config: the bundled Grunfeld data or a CSV file.
pub fn load_dataset(cfg: &RunConfig) -> Result<SurDataset, CliError> {
    let source = cfg.dataset.as_deref().ok_or_else(|| CliError::Config("no dataset given (use --dataset)".into()))?;
    let specs: Vec<BlockSpec> = cfg.blocks.iter().map(|b| parse_block_spec(b, cfg.intercept)).collect::<Result<_, _>>()?;
    if source.eq_ignore_ascii_case("grunfeld") {
        if specs.is_empty() {
            return Ok(robsur::datasets::grunfeld()?);
        }
        let mut rdr = csv::Reader::from_reader(robsur::datasets::GRUNFELD_CSV.as_bytes());
        let (h, c) = read_columns_from(&mut rdr)?;
        return build_dataset(&h, &c, &specs);
    }
    if specs.is_empty() {
        return Err(CliError::Config("a CSV dataset needs at least one --block specification".into()));
    }
    let (h, c) = read_columns(Path::new(source))?;
    build_dataset(&h, &c, &specs)
}

/// Index of the coefficient named by `block:var`, where either part may be
/// a 1-based position or a name. Variable names also match a column name
/// ending in `_var`.
pub fn coefficient_index(ds: &SurDataset, token: &str) -> Result<usize, CliError> {
    let (b, v) = token
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("coefficient '{token}' must be written as block:variable")))?;
    let blocks = ds.blocks();
    let bi = match b.trim().parse::<usize>() {
        Ok(i) if i >= 1 && i <= blocks.len() => i - 1,
        Ok(i) => return Err(CliError::Config(format!("block index {i} out of range 1..={}", blocks.len()))),
        Err(_) => blocks
            .iter()
            .position(|bl| bl.name == b.trim())
            .ok_or_else(|| CliError::Config(format!("unknown block '{}'", b.trim())))?,
    };
    let names = &blocks[bi].predictor_names;
    let v = v.trim();
    let vi = match v.parse::<usize>() {
        Ok(i) if i >= 1 && i <= names.len() => i - 1,
        Ok(i) => return Err(CliError::Config(format!("variable index {i} out of range 1..={}", names.len()))),
        Err(_) => {
            if let Some(i) = names.iter().position(|n| n == v) {
                i
            } else {
                let suffix = format!("_{v}");
                let hits: Vec<usize> = names.iter().enumerate().filter(|(_, n)| n.ends_with(&suffix)).map(|(i, _)| i).collect();
                match hits.as_slice() {
                    [i] => *i,
                    _ => return Err(CliError::Config(format!("unknown variable '{v}' in block '{}'", blocks[bi].name))),
                }
            }
        }
    };
    Ok(ds.offsets()[bi] + vi)
}

/// One restriction row from shorthand: `coef b:v = value` or `equal b1:v1 b2:v2`.
pub fn parse_restriction_row(ds: &SurDataset, text: &str) -> Result<(Vec<f64>, f64), CliError> {
    let p = ds.p();
    let mut row = vec![0.0; p];
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("coef ") {
        let (lhs, rhs) = rest.split_once('=').ok_or_else(|| CliError::Config(format!("restriction '{t}' lacks '= value'")))?;
        let q: f64 = rhs.trim().parse().map_err(|_| CliError::Config(format!("restriction '{t}': bad value '{}'", rhs.trim())))?;
        row[coefficient_index(ds, lhs.trim())?] = 1.0;
        Ok((row, q))
    } else if let Some(rest) = t.strip_prefix("equal ") {
        let parts: Vec<&str> = rest.split_whitespace().collect();
        let [a, b] = parts.as_slice() else {
            return Err(CliError::Config(format!("restriction '{t}' must name exactly two coefficients")));
        };
        let (ia, ib) = (coefficient_index(ds, a)?, coefficient_index(ds, b)?);
        if ia == ib {
            return Err(CliError::Config(format!("restriction '{t}' names the same coefficient twice")));
        }
        row[ia] = 1.0;
        row[ib] = -1.0;
        Ok((row, 0.0))
    } else {
        Err(CliError::Config(format!("restriction '{t}' must start with 'coef' or 'equal'")))
    }
}

/// Linear restriction from shorthand rows and/or explicit R, q.
pub fn build_restriction(cfg: &RunConfig, ds: &SurDataset) -> Result<Option<Restriction>, CliError> {
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    if let Some(r) = &cfg.r {
        let q = cfg.q.clone().unwrap_or_else(|| vec![0.0; r.len()]);
        if q.len() != r.len() {
            return Err(CliError::Config(format!("R has {} rows but q has {} entries", r.len(), q.len())));
        }
        for (row, qv) in r.iter().zip(q) {
            if row.len() != ds.p() {
                return Err(CliError::Config(format!("R rows need {} entries, got {}", ds.p(), row.len())));
            }
            rows.push((row.clone(), qv));
        }
    }
    for s in &cfg.restrict {
        rows.push(parse_restriction_row(ds, s)?);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let r = DMatrix::from_fn(rows.len(), ds.p(), |i, j| rows[i].0[j]);
    let q = DVector::from_iterator(rows.len(), rows.iter().map(|x| x.1));
    Ok(Some(Restriction::linear(r, q)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_spec_forms() {
        let b = parse_block_spec("GE: GE_Investment ~ GE_Shares + GE_Capital", true).unwrap();
        assert_eq!(b.predictors, vec!["GE_Shares", "GE_Capital"]);
        assert!(b.intercept);
        let b = parse_block_spec("a: y ~ 1", false).unwrap();
        assert!(b.intercept && b.predictors.is_empty());
        let b = parse_block_spec("a: y ~ x + 0", true).unwrap();
        assert!(!b.intercept);
        assert!(parse_block_spec("a: y ~ 0", true).is_err());
        assert!(parse_block_spec("y ~ x", true).is_err());
    }

    #[test]
    fn grunfeld_shorthand() {
        let ds = robsur::datasets::grunfeld().unwrap();
        let (row, q) = parse_restriction_row(&ds, "equal 1:Shares 2:Shares").unwrap();
        assert_eq!(row[1], 1.0);
        assert_eq!(row[4], -1.0);
        assert_eq!(q, 0.0);
        let (row, q) = parse_restriction_row(&ds, "coef DM:3 = 0.5").unwrap();
        assert_eq!(row[8], 1.0);
        assert_eq!(q, 0.5);
        assert!(parse_restriction_row(&ds, "coef 4:Shares = 0").is_err());
        assert!(parse_restriction_row(&ds, "equal 1:Shares 1:Shares").is_err());
    }
}
