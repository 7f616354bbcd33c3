//! Experiment driver for the continual domain adaptation benchmark: config
//! parsing, per-(method, seed) runs and result reports.

pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use report::cmd_report;
pub use run::{cmd_gen_data, cmd_run};
