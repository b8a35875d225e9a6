//! Experiment runner for the debiasing lab: config parsing, single runs,
//! concurrent sweeps, CSV and markdown reporting, and the gradient check.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod report;

pub use config::{ExperimentConfig, LambdaH};
pub use error::{CliError, CliResult};
pub use experiment::{run_experiment, sweep, RunOutcome, SweepResult};
pub use gradcheck::{gradcheck_suite, GradcheckReport};
pub use report::{aggregate, markdown, RawRow, ResultsTable};
