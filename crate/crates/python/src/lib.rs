//! Python bindings: datasets, classical and robust fits, bootstrap
//! intervals, hypothesis tests and outlier diagnostics.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use robsur::design::Design;
use robsur::diagnostics::{classify_outliers, predictor_robust_distances, residual_distances};
use robsur::frb::FrbEngine;
use robsur::inference::ci::{ci_asymptotic, empirical_constants, frb_intervals};
use robsur::inference::hypothesis::{run_test, TestKind, TestOptions};
use robsur::{Block, FitConfig, Restriction, SurDataset};

create_exception!(robsur_py, SurError, PyException);

fn err(e: robsur::SurError) -> PyErr {
    SurError::new_err(e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(SurError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), nc, |i, j| rows[i][j]))
}

fn fit_config(n_subsamples: usize, seed: u64) -> FitConfig {
    FitConfig { n_subsamples, seed, ..Default::default() }
}

/// Tukey bisquare tuning constants for the S and MM stages.
#[pyclass(name = "TuningConstants", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTuning {
    inner: robsur::TuningConstants,
}

#[pymethods]
impl PyTuning {
    #[new]
    #[pyo3(signature = (m, breakdown=0.5, efficiency=0.9))]
    fn new(m: usize, breakdown: f64, efficiency: f64) -> PyResult<Self> {
        Ok(PyTuning { inner: robsur::TuningConstants::new(breakdown, efficiency, m).map_err(err)? })
    }
    #[getter]
    fn c0(&self) -> f64 {
        self.inner.c0
    }
    #[getter]
    fn c1(&self) -> f64 {
        self.inner.c1
    }
    #[getter]
    fn delta0(&self) -> f64 {
        self.inner.delta0
    }
    #[getter]
    fn delta1(&self) -> f64 {
        self.inner.delta1
    }
    fn __repr__(&self) -> String {
        let t = &self.inner;
        format!("TuningConstants(m={}, c0={:.6}, c1={:.6}, delta0={:.6}, delta1={:.6})", t.m, t.c0, t.c1, t.delta0, t.delta1)
    }
}

/// A SUR dataset: one (name, X, y) triple per equation.
#[pyclass(name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: SurDataset,
}

#[pymethods]
impl PyDataset {
    /// `blocks` is a list of (name, X rows, y); `predictor_names` optionally
    /// names the columns of each X.
    #[new]
    #[pyo3(signature = (blocks, predictor_names=None))]
    fn new(blocks: Vec<(String, Vec<Vec<f64>>, Vec<f64>)>, predictor_names: Option<Vec<Vec<String>>>) -> PyResult<Self> {
        if predictor_names.as_ref().is_some_and(|p| p.len() != blocks.len()) {
            return Err(SurError::new_err("one list of predictor names per block required"));
        }
        let mut out = Vec::with_capacity(blocks.len());
        for (j, (name, x, y)) in blocks.into_iter().enumerate() {
            let mut b = Block::new(name, matrix(&x)?, DVector::from_vec(y));
            if let Some(p) = &predictor_names {
                b = b.with_predictor_names(p[j].clone());
            }
            out.push(b);
        }
        Ok(PyDataset { inner: SurDataset::new(out).map_err(err)? })
    }
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }
    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }
    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }
    #[getter]
    fn coefficient_names(&self) -> Vec<String> {
        self.inner.coefficient_names()
    }
    fn responses(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.response_matrix())
    }
    fn __repr__(&self) -> String {
        format!("Dataset(n={}, m={}, p={})", self.inner.n(), self.inner.m(), self.inner.p())
    }
}

/// S- and MM-estimates of a SUR model.
#[pyclass(name = "RobustFit", frozen)]
struct PyRobustFit {
    inner: robsur::RobustFit,
    dataset: SurDataset,
}

#[pymethods]
impl PyRobustFit {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.mm.beta.as_slice().to_vec()
    }
    #[getter]
    fn sigma(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.mm.sigma)
    }
    #[getter]
    fn scale(&self) -> f64 {
        self.inner.mm.scale
    }
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.mm.weights.clone()
    }
    #[getter]
    fn distances(&self) -> Vec<f64> {
        self.inner.mm.distances.clone()
    }
    #[getter]
    fn beta_s(&self) -> Vec<f64> {
        self.inner.s.beta.as_slice().to_vec()
    }
    #[getter]
    fn sigma_s(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.s.sigma)
    }
    #[getter]
    fn scale_s(&self) -> f64 {
        self.inner.s.scale
    }
    #[getter]
    fn converged(&self) -> bool {
        self.inner.s.converged && self.inner.mm.converged
    }
    #[getter]
    fn coefficient_names(&self) -> Vec<String> {
        self.dataset.coefficient_names()
    }

    /// FRB replicates of (β̂, vec Γ̂, vec Σ̃, β̃), one list per valid replicate.
    #[pyo3(signature = (n_bootstrap=1000, seed=0))]
    fn frb_replicates(&self, n_bootstrap: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let engine = FrbEngine::new(&Design::from_dataset(&self.dataset), &self.inner).map_err(err)?;
        let reps = engine.replicates(n_bootstrap, seed).map_err(err)?;
        Ok(reps.replicates.iter().map(|(_, v)| v.as_slice().to_vec()).collect())
    }

    /// Asymptotic, bootstrap percentile and BCa intervals for the MM coefficients.
    #[pyo3(signature = (level=0.95, n_bootstrap=1000, seed=0))]
    fn confidence_intervals<'py>(&self, py: Python<'py>, level: f64, n_bootstrap: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let design = Design::from_dataset(&self.dataset);
        let names = self.dataset.coefficient_names();
        let engine = FrbEngine::new(&design, &self.inner).map_err(err)?;
        let reps = engine.replicates(n_bootstrap, seed).map_err(err)?;
        let mut cis = ci_asymptotic(&self.inner, &design, &empirical_constants(&self.inner).map_err(err)?, level, &names).map_err(err)?;
        cis.extend(frb_intervals(&engine, &reps, level, &names).map_err(err)?);
        cis.iter()
            .map(|c| {
                let d = PyDict::new(py);
                d.set_item("parameter", &c.parameter)?;
                d.set_item("method", format!("{:?}", c.method).replace("Percentile", "BP").replace("Asymptotic", "AS").replace("Bca", "BCa"))?;
                d.set_item("estimate", c.estimate)?;
                d.set_item("lower", c.lower)?;
                d.set_item("upper", c.upper)?;
                d.set_item("level", c.level)?;
                Ok(d)
            })
            .collect()
    }
}

/// The bundled Grunfeld investment data (GE, Westinghouse, Diamond Match).
#[pyfunction]
fn grunfeld() -> PyResult<PyDataset> {
    Ok(PyDataset { inner: robsur::datasets::grunfeld().map_err(err)? })
}

/// Gaussian maximum-likelihood (iterated FGLS) fit.
#[pyfunction]
#[pyo3(signature = (dataset, tol=1e-10, max_iter=500))]
fn mle_fit<'py>(py: Python<'py>, dataset: &PyDataset, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
    let f = robsur::classical::mle_fit(&dataset.inner, tol, max_iter).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("beta", f.beta.as_slice().to_vec())?;
    d.set_item("sigma", rows(&f.sigma))?;
    d.set_item("loglik", f.loglik)?;
    d.set_item("iterations", f.iterations)?;
    Ok(d)
}

/// S- and MM-fit with the given breakdown point and normal efficiency.
#[pyfunction]
#[pyo3(signature = (dataset, breakdown=0.5, efficiency=0.9, n_subsamples=500, seed=0))]
fn robust_fit(dataset: &PyDataset, breakdown: f64, efficiency: f64, n_subsamples: usize, seed: u64) -> PyResult<PyRobustFit> {
    let tuning = robsur::TuningConstants::new(breakdown, efficiency, dataset.inner.m()).map_err(err)?;
    let fit = robsur::robust::robust_fit(&dataset.inner, &tuning, &fit_config(n_subsamples, seed)).map_err(err)?;
    Ok(PyRobustFit { inner: fit, dataset: dataset.inner.clone() })
}

fn test_dict<'py>(py: Python<'py>, r: &robsur::inference::TestResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("test", r.test.name())?;
    d.set_item("statistic", r.statistic)?;
    d.set_item("df", r.df)?;
    d.set_item("factor", r.factor)?;
    d.set_item("p_asymptotic", r.p_asymptotic)?;
    d.set_item("p_bootstrap", r.p_bootstrap)?;
    d.set_item("n_effective", r.n_effective)?;
    d.set_item("n_skipped", r.n_skipped)?;
    d.set_item("warning", r.warning.clone())?;
    d.set_item("replicate_statistics", r.replicate_statistics.clone())?;
    Ok(d)
}

fn test_kind(estimator: &str, diag: bool) -> PyResult<TestKind> {
    let prefix = if diag { "lm" } else { "lambda" };
    format!("{prefix}_{estimator}").parse::<TestKind>().map_err(err)
}

/// Test the linear restriction R β = q.
#[pyfunction]
#[pyo3(signature = (dataset, r, q, estimator="mm", n_bootstrap=1000, seed=0, breakdown=0.5, efficiency=0.9, n_subsamples=500))]
#[allow(clippy::too_many_arguments)]
fn test_coef<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    r: Vec<Vec<f64>>,
    q: Vec<f64>,
    estimator: &str,
    n_bootstrap: usize,
    seed: u64,
    breakdown: f64,
    efficiency: f64,
    n_subsamples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let restriction = Restriction::linear(matrix(&r)?, DVector::from_vec(q)).map_err(err)?;
    let tuning = robsur::TuningConstants::new(breakdown, efficiency, dataset.inner.m()).map_err(err)?;
    let opts = TestOptions { n_bootstrap, seed, tuning, fit: fit_config(n_subsamples, seed) };
    let res = run_test(&dataset.inner, test_kind(estimator, false)?, Some(&restriction), &opts).map_err(err)?;
    test_dict(py, &res)
}

/// Test whether the error covariance matrix is diagonal.
#[pyfunction]
#[pyo3(signature = (dataset, estimator="mm", n_bootstrap=1000, seed=0, breakdown=0.5, efficiency=0.9, n_subsamples=500))]
fn test_diag<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    estimator: &str,
    n_bootstrap: usize,
    seed: u64,
    breakdown: f64,
    efficiency: f64,
    n_subsamples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let tuning = robsur::TuningConstants::new(breakdown, efficiency, dataset.inner.m()).map_err(err)?;
    let opts = TestOptions { n_bootstrap, seed, tuning, fit: fit_config(n_subsamples, seed) };
    let res = run_test(&dataset.inner, test_kind(estimator, true)?, None, &opts).map_err(err)?;
    test_dict(py, &res)
}

/// Residual and robust predictor distances with outlier classes.
#[pyfunction]
#[pyo3(signature = (fit, quantile=0.975))]
fn diagnose<'py>(py: Python<'py>, fit: &PyRobustFit, quantile: f64) -> PyResult<Bound<'py, PyDict>> {
    let ds = &fit.dataset;
    let design = Design::from_dataset(ds);
    let d = residual_distances(&design, &fit.inner.mm.beta, &fit.inner.mm.sigma).map_err(err)?;
    let cfg = FitConfig { n_subsamples: 500, ..Default::default() };
    let (rd, p_prime) = predictor_robust_distances(ds, 0.5, 0.9, &cfg).map_err(err)?;
    let diag = classify_outliers(&d, &rd, ds.m(), p_prime, quantile).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("residual_distances", d)?;
    out.set_item("robust_distances", rd)?;
    out.set_item("classes", diag.records.iter().map(|r| r.class.as_str()).collect::<Vec<_>>())?;
    out.set_item("residual_cutoff", diag.residual_cutoff)?;
    out.set_item("leverage_cutoff", diag.leverage_cutoff)?;
    Ok(out)
}

#[pymodule]
fn robsur_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SurError", m.py().get_type::<SurError>())?;
    m.add_class::<PyTuning>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRobustFit>()?;
    m.add_function(wrap_pyfunction!(grunfeld, m)?)?;
    m.add_function(wrap_pyfunction!(mle_fit, m)?)?;
    m.add_function(wrap_pyfunction!(robust_fit, m)?)?;
    m.add_function(wrap_pyfunction!(test_coef, m)?)?;
    m.add_function(wrap_pyfunction!(test_diag, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    Ok(())
}
