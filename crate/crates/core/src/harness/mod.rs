//! Closed-loop simulation, paired Monte Carlo experiments and the CLI.

pub mod cli;
pub mod config;
pub mod montecarlo;
pub mod sim;

pub use cli::cli_main;
pub use config::{Controller, ControllerChoice, ExperimentConfig, Resolved};
pub use montecarlo::{run_monte_carlo, write_outputs, McResult, McSummary, OutputOptions};
pub use sim::{run_closed_loop, RunRecord, SimOptions};
