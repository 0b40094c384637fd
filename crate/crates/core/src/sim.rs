//! Simulation harness: scenario generators (normal or t3 errors, several
//! covariance structures, bad-leverage contamination), rejection-rate and
//! confidence-interval coverage experiments.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Block, SurDataset};
use crate::design::Design;
use crate::error::{Result, SurError};
use crate::frb::FrbEngine;
use crate::inference::ci::{ci_asymptotic, empirical_constants, frb_intervals, CiMethod};
use crate::inference::hypothesis::{run_test, TestKind, TestOptions};
use crate::restriction::Restriction;
use crate::rho::TuningConstants;
use crate::robust::{robust_fit, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "tau", rename_all = "snake_case")]
pub enum SigmaStructure {
    Equicorrelation(f64),
    /// Identity except Σ₁₂ = Σ₂₁ = τ.
    SinglePair(f64),
    Identity,
}

impl SigmaStructure {
    pub fn matrix(&self, m: usize) -> DMatrix<f64> {
        match *self {
            SigmaStructure::Identity => DMatrix::identity(m, m),
            SigmaStructure::Equicorrelation(t) => DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { t }),
            SigmaStructure::SinglePair(t) => {
                let mut s = DMatrix::identity(m, m);
                if m >= 2 {
                    s[(0, 1)] = t;
                    s[(1, 0)] = t;
                }
                s
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    Normal,
    /// Multivariate t with 3 degrees of freedom and scatter Σ.
    T3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub n: usize,
    pub m: usize,
    /// Non-intercept predictors per block; every block also has an intercept.
    pub predictors: usize,
    /// Full coefficient vector; defaults to (1, …, 1, d).
    pub beta: Option<Vec<f64>>,
    pub d: f64,
    pub sigma: SigmaStructure,
    pub errors: ErrorFamily,
    pub contamination: f64,
    pub seed: u64,
    pub repetitions: usize,
    pub n_bootstrap: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            n: 100,
            m: 3,
            predictors: 2,
            beta: None,
            d: 0.0,
            sigma: SigmaStructure::Equicorrelation(0.5),
            errors: ErrorFamily::Normal,
            contamination: 0.0,
            seed: 1,
            repetitions: 300,
            n_bootstrap: 500,
        }
    }
}

impl ScenarioSpec {
    pub fn p(&self) -> usize {
        self.m * (self.predictors + 1)
    }

    pub fn true_beta(&self) -> Vec<f64> {
        self.beta.clone().unwrap_or_else(|| {
            let mut b = vec![1.0; self.p()];
            *b.last_mut().unwrap() = self.d;
            b
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.contamination) {
            return Err(SurError::InvalidInput(format!("contamination fraction {} outside [0, 0.5)", self.contamination)));
        }
        if self.m == 0 || self.n <= self.predictors + 1 {
            return Err(SurError::InvalidInput("need m ≥ 1 and n larger than the block size".into()));
        }
        if self.true_beta().len() != self.p() {
            return Err(SurError::DimensionMismatch(format!("beta has {} entries, expected {}", self.true_beta().len(), self.p())));
        }
        let tau = match self.sigma {
            SigmaStructure::Equicorrelation(t) | SigmaStructure::SinglePair(t) => t,
            SigmaStructure::Identity => 0.0,
        };
        let lower = if self.m > 1 { -1.0 / (self.m as f64 - 1.0) } else { -1.0 };
        if matches!(self.sigma, SigmaStructure::Equicorrelation(_)) && !(tau > lower && tau < 1.0) {
            return Err(SurError::InvalidInput(format!("τ = {tau} outside ({lower}, 1)")));
        }
        if !(tau > -1.0 && tau < 1.0) {
            return Err(SurError::InvalidInput(format!("τ = {tau} outside (-1, 1)")));
        }
        Ok(())
    }

    /// Number of contaminated leading rows.
    pub fn n_contaminated(&self) -> usize {
        (self.contamination * self.n as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

/// One simulated dataset, deterministic in (spec.seed, rep).
pub fn generate_scenario(spec: &ScenarioSpec, rep: u64) -> Result<SurDataset> {
    spec.validate()?;
    let (n, m, q) = (spec.n, spec.m, spec.predictors);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(rep);
    let beta = spec.true_beta();
    let chol = spec
        .sigma
        .matrix(m)
        .cholesky()
        .ok_or_else(|| SurError::InvalidInput("scenario Σ is not positive definite".into()))?
        .l();
    let chi3 = ChiSquared::new(3.0).expect("valid df");
    let mut errors = DMatrix::zeros(n, m);
    for i in 0..n {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut e = &chol * z;
        if spec.errors == ErrorFamily::T3 {
            let w: f64 = chi3.sample(&mut rng);
            e /= (w / 3.0).sqrt();
        }
        errors.row_mut(i).copy_from(&e.transpose());
    }
    let n_bad = spec.n_contaminated();
    let unif = Uniform::new(-10.0, -5.0).expect("valid range");
    // Clean draws come first so that datasets differing only in the
    // contamination fraction share their clean rows.
    let mut parts: Vec<(DMatrix<f64>, DVector<f64>)> = (0..m)
        .map(|j| {
            let x = DMatrix::from_fn(n, q + 1, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
            let b = DVector::from_column_slice(&beta[j * (q + 1)..(j + 1) * (q + 1)]);
            let y = &x * &b + errors.column(j);
            (x, y)
        })
        .collect();
    for (x, y) in parts.iter_mut() {
        for i in 0..n_bad {
            for c in 1..=q {
                x[(i, c)] = unif.sample(&mut rng);
            }
            y[i] += 20.0 + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let blocks = parts
        .into_iter()
        .enumerate()
        .map(|(j, (x, y))| {
            let names = (0..=q).map(|c| if c == 0 { "Intercept".to_string() } else { format!("x{c}") }).collect();
            Block::new(format!("y{}", j + 1), x, y).with_predictor_names(names)
        })
        .collect();
    SurDataset::new(blocks)
}

/// Where the p-value for a rejection decision comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PSource {
    Bootstrap,
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub breakdown: f64,
    pub efficiency: f64,
    pub fit: FitConfig,
    pub alpha: f64,
    /// Confidence level for coverage experiments.
    pub level: f64,
    /// p-value source per test family; None picks bootstrap for robust
    /// tests and asymptotic for the Gaussian ones.
    pub p_source: Option<PSource>,
    /// Directory for per-repetition result files; reruns reuse them.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            breakdown: 0.5,
            efficiency: 0.9,
            fit: FitConfig::default(),
            alpha: 0.05,
            level: 0.95,
            p_source: None,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cell: usize,
    pub spec: ScenarioSpec,
    /// Test name, or interval method for coverage cells.
    pub label: String,
    /// Rejection rate or coverage.
    pub rate: f64,
    pub mc_se: f64,
    pub mean_length: Option<f64>,
    pub n_valid: usize,
    pub n_failed: usize,
    pub runtime_secs: f64,
    /// Per-repetition outcomes; written to CSV, not to the JSON summary.
    #[serde(skip)]
    pub repetitions: Vec<RepetitionRecord>,
}

/// Outcome of one repetition of a cell. Test cells fill `statistic` and
/// `p_value`; coverage cells fill `coverage` and `length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub rep: usize,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub coverage: Option<f64>,
    pub length: Option<f64>,
    pub error: Option<String>,
}

pub fn mc_se(rate: f64, reps: usize) -> f64 {
    if reps == 0 {
        0.0
    } else {
        (rate * (1.0 - rate) / reps as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TestRep {
    rep: usize,
    statistic: Option<f64>,
    p_value: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CoverageRep {
    rep: usize,
    /// Per method: (fraction of slopes covered, mean slope interval length).
    methods: Vec<(CiMethod, f64, f64)>,
    error: Option<String>,
}

fn rep_path(dir: &Option<PathBuf>, cell: &str, rep: usize) -> Option<PathBuf> {
    dir.as_ref().map(|d| d.join(cell).join(format!("rep_{rep:05}.json")))
}

fn load_rep<T: for<'de> Deserialize<'de>>(path: &Option<PathBuf>) -> Option<T> {
    let p = path.as_ref()?;
    let s = std::fs::read_to_string(p).ok()?;
    serde_json::from_str(&s).ok()
}

fn store_rep<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    if let Some(p) = path {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = p.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(value).map_err(|e| SurError::NumericFailure(e.to_string()))?)?;
        std::fs::rename(tmp, p)?;
    }
    Ok(())
}

/// H₀: the last coefficient is zero.
pub fn last_coefficient_restriction(p: usize) -> Restriction {
    let mut r = DMatrix::zeros(1, p);
    r[(0, p - 1)] = 1.0;
    Restriction::Linear { r, q: DVector::zeros(1) }
}

fn cell_name(cell: usize, label: &str) -> String {
    format!("cell_{cell:03}_{label}")
}

fn run_one_test(spec: &ScenarioSpec, kind: TestKind, cfg: &ExperimentConfig, rep: usize) -> TestRep {
    let result = (|| {
        let ds = generate_scenario(spec, rep as u64)?;
        let tuning = TuningConstants::new(cfg.breakdown, cfg.efficiency, spec.m)?;
        let source = cfg.p_source.unwrap_or(if kind.stage().is_some() { PSource::Bootstrap } else { PSource::Asymptotic });
        let n_boot = if source == PSource::Bootstrap { spec.n_bootstrap } else { 0 };
        let mut fit = cfg.fit.clone();
        fit.seed = spec.seed.wrapping_add(rep as u64);
        let opts = TestOptions { n_bootstrap: n_boot, seed: spec.seed ^ (rep as u64).rotate_left(32), tuning, fit };
        let restriction = last_coefficient_restriction(spec.p());
        let res = run_test(&ds, kind, Some(&restriction), &opts)?;
        let p = match source {
            PSource::Bootstrap => res.p_bootstrap.ok_or(SurError::DegenerateBootstrap("no valid replicates".into()))?,
            PSource::Asymptotic => res.p_asymptotic,
        };
        Ok::<_, SurError>((res.statistic, p))
    })();
    match result {
        Ok((s, p)) => TestRep { rep, statistic: Some(s), p_value: Some(p), error: None },
        Err(e) => TestRep { rep, statistic: None, p_value: None, error: Some(e.to_string()) },
    }
}

/// Rejection rates at level `alpha` for each scenario of the grid.
/// Linear-restriction tests use H₀: last coefficient = 0.
pub fn run_level_power(grid: &[ScenarioSpec], kind: TestKind, cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let mut out = Vec::with_capacity(grid.len());
    for (cell, spec) in grid.iter().enumerate() {
        spec.validate()?;
        let start = Instant::now();
        let name = cell_name(cell, kind.name());
        let reps: Vec<TestRep> = (0..spec.repetitions)
            .into_par_iter()
            .map(|rep| {
                let path = rep_path(&cfg.output_dir, &name, rep);
                if let Some(r) = load_rep::<TestRep>(&path) {
                    return Ok(r);
                }
                let r = run_one_test(spec, kind, cfg, rep);
                store_rep(&path, &r)?;
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let ps: Vec<f64> = reps.iter().filter_map(|r| r.p_value).collect();
        let rate = if ps.is_empty() { 0.0 } else { ps.iter().filter(|&&p| p <= cfg.alpha).count() as f64 / ps.len() as f64 };
        out.push(ExperimentResult {
            cell,
            spec: spec.clone(),
            label: kind.name().to_string(),
            rate,
            mc_se: mc_se(rate, ps.len()),
            mean_length: None,
            n_valid: ps.len(),
            n_failed: reps.len() - ps.len(),
            runtime_secs: start.elapsed().as_secs_f64(),
            repetitions: reps
                .iter()
                .map(|r| RepetitionRecord {
                    rep: r.rep,
                    statistic: r.statistic,
                    p_value: r.p_value,
                    coverage: None,
                    length: None,
                    error: r.error.clone(),
                })
                .collect(),
        });
    }
    Ok(out)
}

/// Indices of the non-intercept coefficients.
fn slope_indices(spec: &ScenarioSpec) -> Vec<usize> {
    (0..spec.p()).filter(|k| k % (spec.predictors + 1) != 0).collect()
}

fn run_one_coverage(spec: &ScenarioSpec, cfg: &ExperimentConfig, rep: usize) -> CoverageRep {
    let result = (|| {
        let ds = generate_scenario(spec, rep as u64)?;
        let tuning = TuningConstants::new(cfg.breakdown, cfg.efficiency, spec.m)?;
        let mut fc = cfg.fit.clone();
        fc.seed = spec.seed.wrapping_add(rep as u64);
        let fit = robust_fit(&ds, &tuning, &fc)?;
        let design = Design::from_dataset(&ds);
        let names = ds.coefficient_names();
        let engine = FrbEngine::new(&design, &fit)?;
        let reps = engine.replicates(spec.n_bootstrap, spec.seed ^ (rep as u64).rotate_left(32))?;
        let mut cis = frb_intervals(&engine, &reps, cfg.level, &names)?;
        cis.extend(ci_asymptotic(&fit, &design, &empirical_constants(&fit)?, cfg.level, &names)?);
        let truth = spec.true_beta();
        let slopes = slope_indices(spec);
        let methods = [CiMethod::Asymptotic, CiMethod::Percentile, CiMethod::Bca]
            .into_iter()
            .map(|method| {
                let sel: Vec<_> = cis.iter().filter(|c| c.method == method && slopes.contains(&c.index)).collect();
                let cov = sel.iter().filter(|c| c.contains(truth[c.index])).count() as f64 / sel.len() as f64;
                let len = sel.iter().map(|c| c.length()).sum::<f64>() / sel.len() as f64;
                (method, cov, len)
            })
            .collect();
        Ok::<_, SurError>(methods)
    })();
    match result {
        Ok(methods) => CoverageRep { rep, methods, error: None },
        Err(e) => CoverageRep { rep, methods: vec![], error: Some(e.to_string()) },
    }
}

/// Coverage of the true slopes and mean interval length for the AS, BP and
/// BCa intervals of the MM coefficients, averaged over slopes.
pub fn run_coverage(grid: &[ScenarioSpec], cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let mut out = Vec::new();
    for (cell, spec) in grid.iter().enumerate() {
        spec.validate()?;
        let start = Instant::now();
        let name = cell_name(cell, "coverage");
        let reps: Vec<CoverageRep> = (0..spec.repetitions)
            .into_par_iter()
            .map(|rep| {
                let path = rep_path(&cfg.output_dir, &name, rep);
                if let Some(r) = load_rep::<CoverageRep>(&path) {
                    return Ok(r);
                }
                let r = run_one_coverage(spec, cfg, rep);
                store_rep(&path, &r)?;
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let runtime = start.elapsed().as_secs_f64();
        let ok: Vec<&CoverageRep> = reps.iter().filter(|r| r.error.is_none()).collect();
        let n_slopes = slope_indices(spec).len();
        for method in [CiMethod::Asymptotic, CiMethod::Percentile, CiMethod::Bca] {
            let vals: Vec<(f64, f64)> =
                ok.iter().filter_map(|r| r.methods.iter().find(|m| m.0 == method).map(|m| (m.1, m.2))).collect();
            let nv = vals.len().max(1) as f64;
            let rate = vals.iter().map(|v| v.0).sum::<f64>() / nv;
            let len = vals.iter().map(|v| v.1).sum::<f64>() / nv;
            out.push(ExperimentResult {
                cell,
                spec: spec.clone(),
                label: method.as_str().to_string(),
                rate,
                mc_se: mc_se(rate, vals.len() * n_slopes),
                mean_length: Some(len),
                n_valid: vals.len(),
                n_failed: reps.len() - ok.len(),
                runtime_secs: runtime,
                repetitions: reps
                    .iter()
                    .map(|r| {
                        let m = r.methods.iter().find(|m| m.0 == method);
                        RepetitionRecord {
                            rep: r.rep,
                            statistic: None,
                            p_value: None,
                            coverage: m.map(|m| m.1),
                            length: m.map(|m| m.2),
                            error: r.error.clone(),
                        }
                    })
                    .collect(),
            });
        }
    }
    Ok(out)
}

pub fn write_results_csv<W: std::io::Write>(results: &[ExperimentResult], mut out: W) -> Result<()> {
    writeln!(out, "cell,label,n,m,d,sigma,errors,contamination,rate,mc_se,mean_length,n_valid,n_failed,runtime_secs")?;
    for r in results {
        let s = &r.spec;
        let sigma = match s.sigma {
            SigmaStructure::Identity => "identity".to_string(),
            SigmaStructure::Equicorrelation(t) => format!("equicorrelation({t})"),
            SigmaStructure::SinglePair(t) => format!("single_pair({t})"),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{:?},{},{},{},{},{},{},{:.3}",
            r.cell,
            r.label,
            s.n,
            s.m,
            s.d,
            sigma,
            s.errors,
            s.contamination,
            r.rate,
            r.mc_se,
            r.mean_length.map(|v| v.to_string()).unwrap_or_default(),
            r.n_valid,
            r.n_failed,
            r.runtime_secs
        )?;
    }
    Ok(())
}

/// One row per cell and repetition.
pub fn write_repetitions_csv<W: std::io::Write>(results: &[ExperimentResult], mut out: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    writeln!(out, "cell,label,rep,statistic,p_value,coverage,length,error")?;
    for r in results {
        for x in &r.repetitions {
            let err = x.error.as_deref().unwrap_or("").replace(['"', ','], " ");
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.cell,
                r.label,
                x.rep,
                opt(x.statistic),
                opt(x.p_value),
                opt(x.coverage),
                opt(x.length),
                err
            )?;
        }
    }
    Ok(())
}

/// Remove cached repetition files under `dir`.
pub fn clear_cache(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contaminated_rows_are_first() {
        let spec = ScenarioSpec { contamination: 0.1, ..Default::default() };
        let ds = generate_scenario(&spec, 0).unwrap();
        for b in ds.blocks() {
            for i in 0..100 {
                for c in 1..3 {
                    assert_eq!((-10.0..=-5.0).contains(&b.x[(i, c)]), i < 10);
                }
            }
        }
        assert_eq!(spec.n_contaminated(), 10);
        assert_eq!(ScenarioSpec { contamination: 0.3, ..Default::default() }.n_contaminated(), 30);
    }

    #[test]
    fn deterministic_in_seed_and_rep() {
        let spec = ScenarioSpec::default();
        let a = generate_scenario(&spec, 3).unwrap();
        let b = generate_scenario(&spec, 3).unwrap();
        let c = generate_scenario(&spec, 4).unwrap();
        assert_eq!(a.response_matrix(), b.response_matrix());
        assert_ne!(a.response_matrix(), c.response_matrix());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ScenarioSpec { contamination: 0.5, ..Default::default() }.validate().is_err());
        assert!(ScenarioSpec { sigma: SigmaStructure::Equicorrelation(-0.6), ..Default::default() }.validate().is_err());
        assert!(ScenarioSpec { sigma: SigmaStructure::Equicorrelation(-0.4), ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn se_formula() {
        assert!((mc_se(0.05, 300) - (0.05f64 * 0.95 / 300.0).sqrt()).abs() < 1e-15);
    }
}
