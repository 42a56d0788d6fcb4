//! One closed-loop run.
//!
//! Event order per step `k = 0..=T`: plan from the current belief, apply the
//! first input, step the plant, measure, then EKF time and measurement
//! updates. The initial belief is used at `k = 0` without a measurement.

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Controller, Resolved};
use crate::cost::realized_cost;
use crate::error::Result;
use crate::estimator::{ekf_measurement_update, ekf_time_update, Belief};
use crate::linalg::{psd_sqrt, sample_gaussian};
use crate::model::TrueState;
use crate::mpc::{dual_control_step, solve_linear_mpc};

/// Stream ids inside a run's seed: plant noise and controller sampling.
const TRUTH_STREAM: u64 = 0;
const CONTROLLER_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Keep every plant noise draw in the record.
    pub record_noise: bool,
}

/// Every random draw consumed by the plant during one run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLog {
    pub initial_state: DVector<f64>,
    pub process: Vec<DVector<f64>>,
    pub measurement: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub controller: Controller,
    pub seed: u64,
    /// Stage cost summed over the `T + 1` stages on the true states.
    pub realized_cost: f64,
    /// `(1 / (T + 1)) Σ_k ‖x_k - x_{k|k}‖₂`.
    pub mean_estimation_error: f64,
    /// `(1 / (T + 1)) Σ_k tr Σ_{k|k}`.
    pub mean_cov_trace: f64,
    pub truth: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    pub cov_traces: Vec<f64>,
    pub inputs: Vec<DVector<f64>>,
    /// `measurements[k]` is the voltage observed after applying `inputs[k]`.
    pub measurements: Vec<DVector<f64>>,
    /// Controller wall-clock per step, milliseconds.
    pub step_ms: Vec<f64>,
    pub noise: Option<NoiseLog>,
}

impl RunRecord {
    pub fn mean_step_ms(&self) -> f64 {
        self.step_ms.iter().sum::<f64>() / self.step_ms.len() as f64
    }
}

pub fn run_closed_loop(resolved: &Resolved, controller: Controller, seed: u64, opts: SimOptions) -> Result<RunRecord> {
    let model = &resolved.model;
    let cfg = &resolved.controller;
    let steps = resolved.steps;

    let mut truth_rng = ChaCha8Rng::seed_from_u64(seed);
    truth_rng.set_stream(TRUTH_STREAM);
    let mut ctrl_rng = ChaCha8Rng::seed_from_u64(seed);
    ctrl_rng.set_stream(CONTROLLER_STREAM);

    let x0 = sample_gaussian(&resolved.initial.mean, &psd_sqrt(&resolved.initial.cov), &mut truth_rng);
    let mut noise = opts.record_noise.then(|| NoiseLog {
        initial_state: x0.clone(),
        process: Vec::with_capacity(steps + 1),
        measurement: Vec::with_capacity(steps + 1),
    });
    let mut state = TrueState::clamped(x0);
    let mut belief: Belief = resolved.initial.clone();

    let mut truth = Vec::with_capacity(steps + 1);
    let mut estimates = Vec::with_capacity(steps + 1);
    let mut cov_traces = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps + 1);
    let mut step_ms = Vec::with_capacity(steps + 1);

    for k in 0..=steps {
        truth.push(state.clone());
        estimates.push(belief.mean.clone());
        cov_traces.push(belief.cov.trace());

        let window = crate::mpc::DualControlConfig { cost: cfg.cost.window(k), ..cfg.clone() };
        let started = Instant::now();
        let mut plan = match controller {
            Controller::LinearMpc => solve_linear_mpc(model, &belief.mean, &window)?,
            Controller::Dual => dual_control_step(model, &window, &belief, &mut ctrl_rng)?.plan,
        };
        step_ms.push(started.elapsed().as_secs_f64() * 1e3);
        plan.clip_to(model);
        let input = plan.first_input().clone();

        let w = model.sample_process_noise(&mut truth_rng);
        state = model.propagate(&state, &input, &w)?;
        let v = model.sample_measurement_noise(&mut truth_rng);
        let y = model.measure(&state, &v)?;
        if let Some(log) = noise.as_mut() {
            log.process.push(w);
            log.measurement.push(v);
        }

        let predicted = ekf_time_update(model, &belief, &input)?;
        belief = ekf_measurement_update(model, &predicted, &y)?;

        inputs.push(input);
        measurements.push(y);
    }

    let realized = realized_cost(&cfg.cost, &truth, &inputs)?;
    let stages = (steps + 1) as f64;
    let mean_estimation_error =
        truth.iter().zip(&estimates).map(|(x, m)| (&x.soc - m).norm()).sum::<f64>() / stages;
    let mean_cov_trace = cov_traces.iter().sum::<f64>() / stages;

    Ok(RunRecord {
        controller,
        seed,
        realized_cost: realized,
        mean_estimation_error,
        mean_cov_trace,
        truth: truth.into_iter().map(|s| s.soc).collect(),
        estimates,
        cov_traces,
        inputs,
        measurements,
        step_ms,
        noise,
    })
}
