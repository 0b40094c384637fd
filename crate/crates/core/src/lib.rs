//! Robust estimation and inference for seemingly unrelated regression (SUR)
//! models.
//!
//! The crate provides classical estimators (OLS, GLS, iterated FGLS/MLE),
//! high-breakdown S- and MM-estimators with Tukey's bisquare, the fast and
//! robust bootstrap (FRB), confidence intervals, likelihood-ratio type tests
//! for linear coefficient restrictions, a robust Breusch-Pagan diagonality
//! test, outlier diagnostics and a Monte Carlo harness.

pub mod classical;
pub mod data;
pub mod datasets;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod frb;
pub mod inference;
pub mod linalg;
pub mod quadrature;
pub mod restriction;
pub mod rho;
pub mod robust;
pub mod roots;
pub mod sim;

pub use data::{Block, StackedForm, SurDataset};
pub use error::{ErrorCategory, Result, SurError};
pub use restriction::Restriction;
pub use rho::{AsymptoticConstants, RhoSpec, Stage, TuningConstants};
pub use robust::{FitConfig, MMEstimate, RobustFit, SEstimate};
