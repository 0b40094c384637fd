//! Command pipelines and report assembly.

use std::fs::File;
use std::io::BufWriter;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use robsur::classical::mle_fit;
use robsur::design::Design;
use robsur::diagnostics::{classify_outliers, predictor_robust_distances, residual_distances, OutlierClass};
use robsur::frb::FrbEngine;
use robsur::inference::ci::{ci_asymptotic, empirical_constants, frb_intervals};
use robsur::inference::hypothesis::{run_test, TestKind, TestOptions};
use robsur::linalg::correlation;
use robsur::robust::robust_fit;
use robsur::sim::{run_coverage, run_level_power, write_repetitions_csv, write_results_csv};
use robsur::{SurDataset, TuningConstants};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{build_restriction, load_dataset, Estimator, Experiment, RunConfig};
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub timestamp_unix: u64,
    pub config: ResolvedConfig,
    pub result: Value,
}

/// The run config plus everything derived from it.
#[derive(Debug, Serialize)]
pub struct ResolvedConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub tuning: Option<TuningConstants>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub p: Option<usize>,
    pub coefficient_names: Vec<String>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn coefs(names: &[String], beta: &DVector<f64>) -> Value {
    Value::Array(names.iter().zip(beta.iter()).map(|(n, b)| json!({ "name": n, "estimate": b })).collect())
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
}

fn csv_writer(cfg: &RunConfig) -> Result<Option<BufWriter<File>>, CliError> {
    cfg.csv
        .as_ref()
        .map(|p| File::create(p).map(BufWriter::new).map_err(|e| CliError::Config(format!("cannot create {}: {e}", p.display()))))
        .transpose()
}

fn test_kind(estimator: Estimator, diag: bool) -> TestKind {
    match (estimator, diag) {
        (Estimator::Mle, false) => TestKind::LambdaMLE,
        (Estimator::S, false) => TestKind::LambdaS,
        (Estimator::Mm, false) => TestKind::LambdaMM,
        (Estimator::Mle, true) => TestKind::LmMLE,
        (Estimator::S, true) => TestKind::LmS,
        (Estimator::Mm, true) => TestKind::LmMM,
    }
}

fn fit_command(cfg: &RunConfig, ds: &SurDataset) -> Result<Value, CliError> {
    let names = ds.coefficient_names();
    if cfg.estimator == Estimator::Mle {
        let f = mle_fit(ds, cfg.tol, cfg.max_iter)?;
        return Ok(json!({
            "estimator": "mle",
            "coefficients": coefs(&names, &f.beta),
            "sigma": rows(&f.sigma),
            "correlation": rows(&correlation(&f.sigma)),
            "loglik": f.loglik,
            "iterations": f.iterations,
        }));
    }
    let fit = robust_fit(ds, &cfg.tuning(ds.m())?, &cfg.fit_config())?;
    let s = json!({
        "coefficients": coefs(&names, &fit.s.beta),
        "sigma": rows(&fit.s.sigma),
        "correlation": rows(&correlation(&fit.s.sigma)),
        "scale": fit.s.scale,
        "iterations": fit.s.iterations,
        "converged": fit.s.converged,
        "n_candidates": fit.s.n_candidates,
        "n_singular": fit.s.n_singular,
    });
    if cfg.estimator == Estimator::S {
        return Ok(json!({ "estimator": "s", "s": s }));
    }
    Ok(json!({
        "estimator": "mm",
        "coefficients": coefs(&names, &fit.mm.beta),
        "sigma": rows(&fit.mm.sigma),
        "correlation": rows(&correlation(&fit.mm.sigma)),
        "scale": fit.mm.scale,
        "iterations": fit.mm.iterations,
        "converged": fit.mm.converged,
        "s": s,
    }))
}

fn ci_command(cfg: &RunConfig, ds: &SurDataset) -> Result<Value, CliError> {
    if cfg.estimator != Estimator::Mm {
        return Err(CliError::Config("confidence intervals are available for the MM estimator only".into()));
    }
    let names = ds.coefficient_names();
    let fit = robust_fit(ds, &cfg.tuning(ds.m())?, &cfg.fit_config())?;
    let design = Design::from_dataset(ds);
    let engine = FrbEngine::new(&design, &fit)?;
    let reps = engine.replicates(cfg.n_bootstrap, cfg.seed)?;
    let mut intervals = ci_asymptotic(&fit, &design, &empirical_constants(&fit)?, cfg.level, &names)?;
    intervals.extend(frb_intervals(&engine, &reps, cfg.level, &names)?);
    if let Some(w) = csv_writer(cfg)? {
        reps.write_csv(w)?;
    }
    Ok(json!({
        "coefficients": coefs(&names, &fit.mm.beta),
        "intervals": to_value(&intervals)?,
        "n_bootstrap": cfg.n_bootstrap,
        "n_effective": reps.n_effective(),
        "n_skipped": reps.skipped.len(),
        "correction_condition": engine.correction.cond_estimate,
        "warning": reps.warning,
    }))
}

fn test_command(cfg: &RunConfig, ds: &SurDataset, diag: bool) -> Result<Value, CliError> {
    let restriction = if diag {
        None
    } else {
        Some(build_restriction(cfg, ds)?.ok_or_else(|| CliError::Config("test-coef needs at least one --restrict".into()))?)
    };
    let kind = test_kind(cfg.estimator, diag);
    let opts = TestOptions { n_bootstrap: cfg.n_bootstrap, seed: cfg.seed, tuning: cfg.tuning(ds.m())?, fit: cfg.fit_config() };
    let res = run_test(ds, kind, restriction.as_ref(), &opts)?;
    if let Some(w) = csv_writer(cfg)? {
        res.write_csv(w)?;
    }
    let mut v = to_value(&res)?;
    if let (Some(obj), Some(robsur::Restriction::Linear { r, q })) = (v.as_object_mut(), &restriction) {
        obj.insert("restriction".into(), json!({ "r": rows(r), "q": q.as_slice() }));
    }
    Ok(v)
}

fn diagnose_command(cfg: &RunConfig, ds: &SurDataset) -> Result<Value, CliError> {
    let design = Design::from_dataset(ds);
    let (beta, sigma) = match cfg.estimator {
        Estimator::Mle => {
            let f = mle_fit(ds, cfg.tol, cfg.max_iter)?;
            (f.beta, f.sigma)
        }
        Estimator::S | Estimator::Mm => {
            let fit = robust_fit(ds, &cfg.tuning(ds.m())?, &cfg.fit_config())?;
            if cfg.estimator == Estimator::S {
                (fit.s.beta, fit.s.sigma)
            } else {
                (fit.mm.beta, fit.mm.sigma)
            }
        }
    };
    let d = residual_distances(&design, &beta, &sigma)?;
    let (rd, p_prime) = predictor_robust_distances(ds, cfg.breakdown, cfg.efficiency, &cfg.fit_config())?;
    let diag = classify_outliers(&d, &rd, ds.m(), p_prime, cfg.quantile)?;
    if let Some(w) = csv_writer(cfg)? {
        diag.write_csv(w)?;
    }
    let flagged = |c| diag.flagged(c);
    Ok(json!({
        "estimator": cfg.estimator,
        "residual_cutoff": diag.residual_cutoff,
        "leverage_cutoff": diag.leverage_cutoff,
        "p_prime": p_prime,
        "vertical_outliers": flagged(OutlierClass::VerticalOutlier),
        "bad_leverage": flagged(OutlierClass::BadLeverage),
        "good_leverage": flagged(OutlierClass::GoodLeverage),
        "records": to_value(&diag.records)?,
    }))
}

fn simulate_command(cfg: &RunConfig) -> Result<Value, CliError> {
    let sim = &cfg.simulation;
    let ecfg = cfg.experiment_config();
    let results = match sim.experiment {
        Experiment::LevelPower => {
            let kind: TestKind = sim.test.parse()?;
            run_level_power(&sim.grid, kind, &ecfg)?
        }
        Experiment::Coverage => run_coverage(&sim.grid, &ecfg)?,
    };
    if let Some(w) = csv_writer(cfg)? {
        write_results_csv(&results, w)?;
    }
    if let Some(path) = &cfg.csv {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("simulation");
        let reps = path.with_file_name(format!("{stem}_repetitions.csv"));
        let f = File::create(&reps).map_err(|e| CliError::Config(format!("cannot create {}: {e}", reps.display())))?;
        write_repetitions_csv(&results, BufWriter::new(f))?;
    }
    let mut v = to_value(&results)?;
    // Runtimes vary between runs; keep them out of the deterministic report.
    if let Some(arr) = v.as_array_mut() {
        for cell in arr {
            if let Some(o) = cell.as_object_mut() {
                o.remove("runtime_secs");
            }
        }
    }
    Ok(json!({ "experiment": sim.experiment, "cells": v }))
}

pub fn run_command(command: &str, cfg: &RunConfig) -> Result<Report, CliError> {
    let ds = if command == "simulate" { None } else { Some(load_dataset(cfg)?) };
    let result = match (command, &ds) {
        ("fit", Some(ds)) => fit_command(cfg, ds)?,
        ("ci", Some(ds)) => ci_command(cfg, ds)?,
        ("test-coef", Some(ds)) => test_command(cfg, ds, false)?,
        ("test-diag", Some(ds)) => test_command(cfg, ds, true)?,
        ("diagnose", Some(ds)) => diagnose_command(cfg, ds)?,
        ("simulate", None) => simulate_command(cfg)?,
        _ => return Err(CliError::Config(format!("unknown command {command}"))),
    };
    let tuning = match &ds {
        Some(ds) if cfg.estimator != Estimator::Mle => Some(cfg.tuning(ds.m())?),
        _ => None,
    };
    let timestamp_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(Report {
        tool: "robsur",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        timestamp_unix,
        config: ResolvedConfig {
            run: cfg.clone(),
            tuning,
            n: ds.as_ref().map(|d| d.n()),
            m: ds.as_ref().map(|d| d.m()),
            p: ds.as_ref().map(|d| d.p()),
            coefficient_names: ds.as_ref().map(|d| d.coefficient_names()).unwrap_or_default(),
        },
        result,
    })
}
