//! Experiment orchestration: config files, seeded parallel trials, windowed
//! CSV output, cross-trial aggregation and the `stop` CLI.

pub mod aggregate;
pub mod cli;
pub mod config;
pub mod run;
pub mod table1;

pub use aggregate::{aggregate, SummaryRow};
pub use cli::cli;
pub use config::{EnvSpec, ExperimentConfig};
pub use run::{run_experiment, RunReport, WindowRow};
pub use table1::{table1, Table1Row};
