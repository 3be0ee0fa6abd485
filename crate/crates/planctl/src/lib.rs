//! Experiment harness for the `skipplan` planner: configuration files, the
//! experiment registry, run execution, aggregation and reports.

pub mod aggregate;
pub mod cli;
pub mod commands;
pub mod config;
pub mod io;
pub mod registry;
pub mod report;
pub mod runner;

pub use config::{ArmConfig, ExperimentConfig, ModelConfig, RunSpec};
pub use runner::RunRecord;

use skipplan::Error;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Version { .. } => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}
