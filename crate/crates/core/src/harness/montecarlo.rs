//! Paired Monte Carlo runner and its CSV / JSON outputs.
//!
//! Run `j` of every arm uses the same derived seed, so the plant noise
//! sequence is shared between controllers and improvements are paired.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Controller, Resolved};
use super::sim::{run_closed_loop, RunRecord, SimOptions};
use crate::error::{Error, Result};

pub const RUNS_HEADER: &str = "run,controller,cost,est_error,cov_trace";
pub const TIMING_HEADER: &str = "run,controller,step_ms";

/// Seed of run `run` derived from the master seed.
pub fn run_seed(master: u64, run: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(run as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    /// Unbiased sample variance (zero for a single run).
    pub var: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, var }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub cost: Moments,
    pub est_error: Moments,
    pub cov_trace: Moments,
    pub step_ms: Moments,
    #[serde(skip)]
    pub costs: Vec<f64>,
    #[serde(skip)]
    pub est_errors: Vec<f64>,
    #[serde(skip)]
    pub cov_traces: Vec<f64>,
}

impl ArmSummary {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let costs: Vec<f64> = records.iter().map(|r| r.realized_cost).collect();
        let est_errors: Vec<f64> = records.iter().map(|r| r.mean_estimation_error).collect();
        let cov_traces: Vec<f64> = records.iter().map(|r| r.mean_cov_trace).collect();
        let steps: Vec<f64> = records.iter().map(RunRecord::mean_step_ms).collect();
        Self {
            cost: Moments::of(&costs),
            est_error: Moments::of(&est_errors),
            cov_trace: Moments::of(&cov_traces),
            step_ms: Moments::of(&steps),
            costs,
            est_errors,
            cov_traces,
        }
    }
}

/// Percentage decrease of the dual arm relative to linear MPC (positive is better).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvements {
    pub cost_pct: f64,
    pub est_error_pct: f64,
    pub cov_trace_pct: f64,
    pub cost_var_pct: f64,
    pub est_error_var_pct: f64,
}

pub fn percent_decrease(baseline: f64, candidate: f64) -> f64 {
    100.0 * (baseline - candidate) / baseline
}

impl Improvements {
    pub fn between(linear: &ArmSummary, dual: &ArmSummary) -> Self {
        Self {
            cost_pct: percent_decrease(linear.cost.mean, dual.cost.mean),
            est_error_pct: percent_decrease(linear.est_error.mean, dual.est_error.mean),
            cov_trace_pct: percent_decrease(linear.cov_trace.mean, dual.cov_trace.mean),
            cost_var_pct: percent_decrease(linear.cost.var, dual.cost.var),
            est_error_var_pct: percent_decrease(linear.est_error.var, dual.est_error.var),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub runs: usize,
    pub seed: u64,
    pub arms: BTreeMap<Controller, ArmSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvements: Option<Improvements>,
}

#[derive(Debug, Clone)]
pub struct McResult {
    pub summary: McSummary,
    pub records: BTreeMap<Controller, Vec<RunRecord>>,
}

pub fn run_monte_carlo(
    resolved: &Resolved,
    arms: &[Controller],
    runs: usize,
    master_seed: u64,
    opts: SimOptions,
) -> Result<McResult> {
    if runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    let mut records = BTreeMap::new();
    for &arm in arms {
        let out: Vec<RunRecord> = (0..runs)
            .into_par_iter()
            .map(|j| {
                let seed = run_seed(master_seed, j);
                run_closed_loop(resolved, arm, seed, opts)
                    .map_err(|e| Error::Run { run: j, seed, source: Box::new(e) })
            })
            .collect::<Result<_>>()?;
        records.insert(arm, out);
    }
    let arms_summary: BTreeMap<_, _> =
        records.iter().map(|(arm, recs)| (*arm, ArmSummary::from_records(recs))).collect();
    let improvements = match (arms_summary.get(&Controller::LinearMpc), arms_summary.get(&Controller::Dual)) {
        (Some(l), Some(d)) => Some(Improvements::between(l, d)),
        _ => None,
    };
    Ok(McResult { summary: McSummary { runs, seed: master_seed, arms: arms_summary, improvements }, records })
}

/// `runs.csv`: one row per (arm, run); contains no timing so identical seeds
/// give identical bytes.
pub fn runs_csv(result: &McResult) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for (arm, recs) in &result.records {
        for (j, r) in recs.iter().enumerate() {
            let _ = writeln!(out, "{j},{arm},{},{},{}", r.realized_cost, r.mean_estimation_error, r.mean_cov_trace);
        }
    }
    out
}

pub fn timing_csv(result: &McResult) -> String {
    let mut out = String::from(TIMING_HEADER);
    out.push('\n');
    for (arm, recs) in &result.records {
        for (j, r) in recs.iter().enumerate() {
            let _ = writeln!(out, "{j},{arm},{}", r.mean_step_ms());
        }
    }
    out
}

/// Per-step log of one run for every arm.
pub fn trace_csv(result: &McResult, run: usize) -> String {
    let n = result.records.values().next().map(|r| r[run].inputs[0].len()).unwrap_or(0);
    let mut out = String::from("controller,k");
    for prefix in ["truth", "estimate", "input", "measurement"] {
        for i in 0..n {
            let _ = write!(out, ",{prefix}_{i}");
        }
    }
    out.push_str(",cov_trace,step_ms\n");
    for (arm, recs) in &result.records {
        let r = &recs[run];
        for k in 0..r.inputs.len() {
            let _ = write!(out, "{arm},{k}");
            for v in [&r.truth[k], &r.estimates[k], &r.inputs[k], &r.measurements[k]] {
                for x in v.iter() {
                    let _ = write!(out, ",{x}");
                }
            }
            let _ = writeln!(out, ",{},{}", r.cov_traces[k], r.step_ms[k]);
        }
    }
    out
}

/// Plant noise draws of one run per arm (requires `record_noise`).
pub fn noise_csv(result: &McResult, run: usize) -> Option<String> {
    let mut out = String::from("controller,k,kind,values\n");
    for (arm, recs) in &result.records {
        let log = recs[run].noise.as_ref()?;
        let fmt = |v: &nalgebra::DVector<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{arm},0,initial,{}", fmt(&log.initial_state));
        for (k, (w, v)) in log.process.iter().zip(&log.measurement).enumerate() {
            let _ = writeln!(out, "{arm},{k},process,{}", fmt(w));
            let _ = writeln!(out, "{arm},{k},measurement,{}", fmt(v));
        }
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutputOptions {
    pub trace: bool,
    pub noise: bool,
}

/// Write `runs.csv`, `timing.csv`, `summary.json` and optional per-run logs.
pub fn write_outputs(result: &McResult, dir: &Path, opts: OutputOptions) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(&path))
    };
    write("runs.csv", &runs_csv(result))?;
    write("timing.csv", &timing_csv(result))?;
    let json = serde_json::to_string_pretty(&result.summary)
        .map_err(|source| Error::Json { path: dir.join("summary.json"), source })?;
    write("summary.json", &json)?;
    for run in 0..result.summary.runs {
        if opts.trace {
            write(&format!("trace_{run}.csv"), &trace_csv(result, run))?;
        }
        if opts.noise {
            if let Some(body) = noise_csv(result, run) {
                write(&format!("noise_{run}.csv"), &body)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_single_value() {
        let m = Moments::of(&[2.5]);
        assert_eq!(m, Moments { mean: 2.5, var: 0.0 });
        let m = Moments::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.var, 1.0);
    }

    #[test]
    fn run_seeds_are_distinct_and_stable() {
        let a: Vec<_> = (0..50).map(|j| run_seed(42, j)).collect();
        let b: Vec<_> = (0..50).map(|j| run_seed(42, j)).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 50);
        assert_ne!(run_seed(43, 0), a[0]);
    }

    #[test]
    fn percent_decrease_sign() {
        assert_eq!(percent_decrease(10.0, 8.0), 20.0);
        assert!(percent_decrease(10.0, 12.0) < 0.0);
    }
}
