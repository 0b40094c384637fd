//! Confidence intervals and hypothesis tests.

pub mod ci;
pub mod hypothesis;

pub use ci::{ci_asymptotic, ci_percentile, empirical_constants, frb_intervals, CiMethod, CiResult};
pub use hypothesis::{
    lm_diag_test, lm_test_mle, lr_test_coef, lr_test_mle, run_test, ClassicalOptions, TestKind, TestOptions,
    TestResult,
};
