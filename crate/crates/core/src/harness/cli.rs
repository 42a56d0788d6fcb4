//! Batch command line: load a config, run the Monte Carlo arms, write results.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

use super::config::{ControllerChoice, ExperimentConfig};
use super::montecarlo::{run_monte_carlo, write_outputs, OutputOptions};
use super::sim::SimOptions;
use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "soc-dual", about = "Monte Carlo comparison of linear MPC and dual control for battery SOC")]
pub struct Args {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Number of runs per controller arm (overrides the config).
    #[arg(long)]
    pub runs: Option<usize>,
    /// linear-mpc, dual or both (overrides the config).
    #[arg(long)]
    pub controller: Option<ControllerChoice>,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// MPC horizon N.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Dual-control candidates L.
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Closed-loop steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Write trace_<run>.csv per-step logs.
    #[arg(long)]
    pub trace: bool,
    /// Write noise_<run>.csv with every plant noise draw.
    #[arg(long)]
    pub log_noise: bool,
    /// Print the built-in three-battery config to stdout and exit.
    #[arg(long, exclusive = true, required = false)]
    pub print_default_config: bool,
}

impl Args {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(c) = self.controller {
            cfg.controller = c;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(h) = self.horizon {
            cfg.cost.horizon = h;
        }
        if let Some(l) = self.candidates {
            cfg.dual.num_candidates = l;
        }
        if let Some(t) = self.steps {
            cfg.steps = t;
        }
    }
}

/// Entry point; returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if args.iter().any(|a| a == "--print-default-config") {
        match serde_json::to_string_pretty(&ExperimentConfig::three_battery_default()) {
            Ok(s) => {
                println!("{s}");
                return EXIT_OK;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_RUNTIME;
            }
        }
    }
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let _ = e.print();
            return EXIT_CONFIG;
        }
    };

    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: cannot load config: {e}");
            return EXIT_CONFIG;
        }
    };
    args.apply(&mut cfg);
    let resolved = match cfg.resolve() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };

    let sim = SimOptions { record_noise: args.log_noise };
    let result = match run_monte_carlo(&resolved, &cfg.controller.arms(), cfg.runs, cfg.seed, sim) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let out = OutputOptions { trace: args.trace, noise: args.log_noise };
    if let Err(e) = write_outputs(&result, &args.out, out) {
        eprintln!("error: {e}");
        return match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
    }

    for (arm, s) in &result.summary.arms {
        println!(
            "{arm:>10}: cost {:.4} (var {:.4})  est_error {:.4}  cov_trace {:.4}  step {:.2} ms",
            s.cost.mean, s.cost.var, s.est_error.mean, s.cov_trace.mean, s.step_ms.mean
        );
    }
    if let Some(imp) = &result.summary.improvements {
        println!(
            "dual vs linear (decrease): cost {:+.1}%  est_error {:+.1}%  cov_trace {:+.1}%",
            imp.cost_pct, imp.est_error_pct, imp.cov_trace_pct
        );
    }
    println!("wrote {}", args.out.display());
    EXIT_OK
}
