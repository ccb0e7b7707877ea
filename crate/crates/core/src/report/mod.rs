//! Metrics, run configuration, result files and the command line.

pub mod cli;
mod config;
mod gradsuite;
mod metrics;
mod results;

pub use config::{DataSource, RunConfig, KEYS};
pub use gradsuite::{check_full_objective, gradient_suite, GradCheckEntry, SUITE_TOLERANCE};
pub use metrics::{acc, fgt, AccuracyMatrix, FGT_DEFINITION};
pub use results::{
    aggregate, attention_dump, curves_csv, find_results, read_result, run_experiment, summarize, summary_csv,
    summary_curves_csv, summary_table, write_experiment, write_results, Experiment, RunResult, Summary,
    ATTENTION_FILE, CURVES_FILE, LOG_FILE, RESULT_FILE, RESULT_FORMAT,
};
