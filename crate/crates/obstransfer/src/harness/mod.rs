//! Configuration, experiment orchestration, metric files, and the
//! command-line entry point.

mod cli;
mod config;
mod metrics;
mod suite;

pub use cli::{cli, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
pub use config::{parse_config, parse_config_text, ExperimentConfig, RunKind};
pub use metrics::{auc, metrics_from_csv, metrics_to_csv, MetricsRow, METRICS_HEADER};
pub use suite::{run_suite, suite_threads, SeedRun, SuiteOutcome, AGGREGATE_FILE, AGGREGATE_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("suite: {0}")]
    Suite(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Run(#[from] crate::transfer::TransferError),
}
