//! Evaluation harness for the spectral estimators: metrics, the toy and
//! file-based experiments, and report rendering.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use error::{BenchError, Result};
pub use experiment::{preset, run_experiment, Estimator, ExperimentConfig, Scenario};
pub use metrics::{predictive_error, rel_norm_diff};
pub use report::ExperimentReport;
