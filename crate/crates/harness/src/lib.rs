//! Experiment orchestration on top of `advicl`: configuration, train/test
//! length sweeps, correlation statistics and the verification suite.

// Validation uses negated comparisons on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod correlation;
mod error;
pub mod sweep;
pub mod verify;

pub use config::ExperimentConfig;
pub use correlation::{correlate, correlation, CorrelationReport};
pub use error::{HarnessError, Result};
pub use sweep::{run_sweep, SweepRecord, SweepSummary};
pub use verify::{verify_all, CheckResult, VerifyPlan, VerifyReport};
