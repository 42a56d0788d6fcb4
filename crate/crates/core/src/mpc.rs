//! Controllers: certainty-equivalence linear MPC, the LPV candidate step and
//! the randomized dual-control step that ranks candidates by the surrogate cost.
//!
//! All controllers plan `N + 1` inputs `I_0..I_N` over the states
//! `x_0..x_N`, where `x_0` is fixed and `x_{k+1} = x_k + diag(g) I_k`. The
//! states are eliminated (condensed form), leaving a QP in the stacked inputs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost::{covariance_penalty, surrogate_cost, CostSpec};
use crate::error::{contract, Error, Result};
use crate::estimator::{covariance_along, prediction_only_rollout, Belief};
use crate::linalg::{clamp_unit, psd_sqrt, sample_gaussian};
use crate::model::SystemModel;
use crate::qp::{AdmmSolver, QpProblem, QpSettings, QpSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Bound slack on returned plans.
pub const PLAN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    /// `N + 1` input vectors; only the first is applied in closed loop.
    pub inputs: Vec<DVector<f64>>,
    /// State trajectory backing the plan, `N + 1` entries starting at `x_0`.
    pub predicted_means: Vec<DVector<f64>>,
    /// Surrogate cost used for ranking; `None` for plain linear MPC.
    pub surrogate_value: Option<f64>,
}

impl ControlPlan {
    pub fn first_input(&self) -> &DVector<f64> {
        &self.inputs[0]
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len() - 1
    }

    /// Clip every input into the model's bounds.
    pub fn clip_to(&mut self, model: &SystemModel) {
        let (lo, hi) = (model.input_lower(), model.input_upper());
        for u in &mut self.inputs {
            *u = u.zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualControlConfig {
    /// Number of candidate trajectories `L`.
    pub num_candidates: usize,
    pub cost: CostSpec,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl DualControlConfig {
    pub fn new(num_candidates: usize, cost: CostSpec) -> Result<Self> {
        if num_candidates == 0 {
            return Err(Error::Config("number of candidates must be at least 1".into()));
        }
        Ok(Self { num_candidates, cost, qp_tol: DEFAULT_TOL, qp_max_iter: DEFAULT_MAX_ITER })
    }

    pub fn horizon(&self) -> usize {
        self.cost.horizon
    }

    fn solver(&self) -> AdmmSolver {
        AdmmSolver::new(QpSettings::with_tol(self.qp_tol, self.qp_max_iter))
    }
}

/// Condensed tracking QP over `U = [I_0; ...; I_N]` with states
/// `x_k = a_k + diag(g) Σ_{j<k} I_j`.
struct CondensedQp {
    problem: QpProblem,
    /// Objective constant so that `½UᵀHU + gᵀU + constant` equals the summed
    /// stage cost on the predicted states.
    constant: f64,
    offsets: Vec<DVector<f64>>,
}

fn build_condensed(model: &SystemModel, cost: &CostSpec, offsets: Vec<DVector<f64>>) -> Result<CondensedQp> {
    let n = model.n();
    let horizon = offsets.len() - 1;
    if cost.n() != n {
        return Err(contract(format!("cost has dimension {}, model has {n}", cost.n())));
    }
    let m = n * (horizon + 1);
    let gains = model.gains();

    // Stage state weight: c QQᵀ + c0 (n I - 11ᵀ).
    let mut state_w = &cost.q_cap * cost.q_cap.transpose() * cost.c;
    for i in 0..n {
        for j in 0..n {
            state_w[(i, j)] += cost.c0 * if i == j { (n - 1) as f64 } else { -1.0 };
        }
    }
    let g_w_g = DMatrix::from_fn(n, n, |i, j| gains[i] * state_w[(i, j)] * gains[j]);

    let mut hess = DMatrix::zeros(m, m);
    for j in 0..=horizon {
        for l in 0..=horizon {
            // Number of states k in 1..=N that depend on both I_j and I_l.
            let shared = horizon - j.max(l);
            if shared > 0 {
                hess.view_mut((j * n, l * n), (n, n)).copy_from(&(&g_w_g * (2.0 * shared as f64)));
            }
        }
        let mut blk = hess.view_mut((j * n, j * n), (n, n));
        blk += &cost.r_weight * 2.0;
    }

    // Per-state linear terms W a_k - c r_k Q, accumulated backwards.
    let mut grad = DVector::zeros(m);
    let mut constant = 0.0;
    let mut tail = DVector::zeros(n);
    for k in (0..=horizon).rev() {
        let a = &offsets[k];
        let r = cost.reference_at(k);
        let lin = &state_w * a - &cost.q_cap * (cost.c * r);
        constant += a.dot(&(&state_w * a)) - 2.0 * cost.c * r * cost.q_cap.dot(a) + cost.c * r * r;
        // I_k affects x_{k+1..N}: its gradient is the sum of later stages.
        grad.rows_mut(k * n, n).copy_from(&(gains.component_mul(&tail) * 2.0));
        tail += lin;
    }

    // x_k ∈ [0, 1] for k = 1..N as rows ±diag(g) Σ_{j<k} I_j.
    let rows = 2 * n * horizon;
    let mut ineq = DMatrix::zeros(rows, m);
    let mut rhs = DVector::zeros(rows);
    for k in 1..=horizon {
        for i in 0..n {
            let up = 2 * ((k - 1) * n + i);
            let down = up + 1;
            for j in 0..k {
                ineq[(up, j * n + i)] = gains[i];
                ineq[(down, j * n + i)] = -gains[i];
            }
            rhs[up] = 1.0 - offsets[k][i];
            rhs[down] = offsets[k][i];
        }
    }

    let lower = DVector::from_iterator(m, (0..m).map(|idx| model.batteries()[idx % n].i_min));
    let upper = DVector::from_iterator(m, (0..m).map(|idx| model.batteries()[idx % n].i_max));
    let mut h_sym = hess;
    crate::linalg::symmetrize(&mut h_sym);
    let problem = QpProblem::new(h_sym, grad, ineq, rhs, lower, upper)?;
    Ok(CondensedQp { problem, constant, offsets })
}

impl CondensedQp {
    fn unstack(&self, model: &SystemModel, point: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = model.n();
        let horizon = self.offsets.len() - 1;
        let inputs: Vec<_> = (0..=horizon).map(|k| point.rows(k * n, n).into_owned()).collect();
        let mut states = Vec::with_capacity(horizon + 1);
        let mut acc = DVector::zeros(n);
        for k in 0..=horizon {
            states.push(&self.offsets[k] + &acc);
            acc += model.gains().component_mul(&inputs[k]);
        }
        (inputs, states)
    }
}

fn solve_condensed(
    model: &SystemModel,
    cfg: &DualControlConfig,
    qp: &CondensedQp,
    warm: Option<&QpSolution>,
) -> Option<(ControlPlan, QpSolution)> {
    let sol = cfg.solver().solve(&qp.problem, warm);
    if !sol.is_optimal() {
        return None;
    }
    let (inputs, states) = qp.unstack(model, &sol.point);
    let mut plan = ControlPlan { inputs, predicted_means: states, surrogate_value: None };
    plan.clip_to(model);
    Some((plan, sol))
}

/// Certainty-equivalence linear MPC: tracking plus effort only, no OCV model
/// and no uniformity term. `x0` is clamped to [0, 1] first.
pub fn solve_linear_mpc(model: &SystemModel, x0: &DVector<f64>, cfg: &DualControlConfig) -> Result<ControlPlan> {
    model.check_dim(x0, "initial state")?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(contract("initial state must be finite"));
    }
    let start = clamp_unit(x0);
    let offsets = vec![start; cfg.horizon() + 1];
    let qp = build_condensed(model, &cfg.cost.without_uniformity(), offsets)?;
    solve_condensed(model, cfg, &qp, None)
        .map(|(plan, _)| plan)
        .ok_or_else(|| Error::Numerical("linear MPC QP did not reach an optimal solution".into()))
}

/// LPV step: the surrogate with covariances frozen at `frozen_covs`, expanded
/// about the nominal pair (`nominal.inputs`, `nominal.predicted_means`).
///
/// The predicted states are `x_k = x*_k + diag(g) Σ_{j<k} (I_j - I*_j)`; mean
/// terms are exact quadratics, the covariance terms are constants. Returns
/// `Ok(None)` when the QP is infeasible or does not converge.
pub fn lpv_candidate(
    model: &SystemModel,
    cfg: &DualControlConfig,
    nominal: &ControlPlan,
    frozen_covs: &[DMatrix<f64>],
) -> Result<Option<ControlPlan>> {
    let len = cfg.horizon() + 1;
    if nominal.inputs.len() != len || nominal.predicted_means.len() != len || frozen_covs.len() != len {
        return Err(contract(format!(
            "nominal plan / frozen covariances must span {len} steps, got {} / {} / {}",
            nominal.inputs.len(),
            nominal.predicted_means.len(),
            frozen_covs.len()
        )));
    }
    let mut offsets = Vec::with_capacity(len);
    let mut acc = DVector::zeros(model.n());
    for k in 0..len {
        offsets.push(&nominal.predicted_means[k] - &acc);
        acc += model.gains().component_mul(&nominal.inputs[k]);
    }
    if offsets[0].iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(contract("nominal initial state must lie in [0, 1]"));
    }
    let qp = build_condensed(model, &cfg.cost, offsets)?;
    let frozen: f64 = frozen_covs.iter().map(|s| covariance_penalty(&cfg.cost, s)).sum();
    Ok(solve_condensed(model, cfg, &qp, None).map(|(mut plan, sol)| {
        plan.surrogate_value = Some(sol.objective + qp.constant + frozen);
        plan
    }))
}

/// Outcome of one dual-control step.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStep {
    /// Selected plan; `predicted_means` is the prediction-only rollout from
    /// the belief and `surrogate_value` its surrogate cost.
    pub plan: ControlPlan,
    /// Surrogate cost per candidate (`None` when the candidate was discarded).
    pub scores: Vec<Option<f64>>,
    /// Index of the selected candidate, or `None` for the fallback plan.
    pub selected: Option<usize>,
}

struct Candidate {
    plan: ControlPlan,
    score: f64,
}

/// One step of the randomized dual controller.
///
/// Candidate 0 plans from the belief mean; every other candidate plans from a
/// sampled initial state and a perturbed nominal input sequence. Each LPV
/// plan is then re-simulated from the actual belief with the prediction-only
/// EKF and scored by the surrogate cost; the cheapest feasible plan wins
/// (ties go to the lowest index). Candidates draw from their own ChaCha
/// stream keyed on one seed taken from `rng`, so the result does not depend
/// on evaluation order.
pub fn dual_control_step<R: Rng + ?Sized>(
    model: &SystemModel,
    cfg: &DualControlConfig,
    belief: &Belief,
    rng: &mut R,
) -> Result<DualStep> {
    model.check_dim(&belief.mean, "belief mean")?;
    let step_seed: u64 = rng.random();
    let sqrt_cov = psd_sqrt(&belief.cov);

    let outcomes: Vec<Result<Option<Candidate>>> = (0..cfg.num_candidates)
        .into_par_iter()
        .map(|i| {
            let mut sub = ChaCha8Rng::seed_from_u64(step_seed);
            sub.set_stream(i as u64);
            evaluate_candidate(model, cfg, belief, &sqrt_cov, i, &mut sub)
        })
        .collect();

    let mut scores = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, Candidate)> = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            Some(c) => {
                scores.push(Some(c.score));
                if best.as_ref().map_or(true, |(_, b)| c.score < b.score) {
                    best = Some((i, c));
                }
            }
            None => scores.push(None),
        }
    }

    if let Some((i, c)) = best {
        return Ok(DualStep { plan: c.plan, scores, selected: Some(i) });
    }

    // Every candidate was discarded: fall back to certainty-equivalence MPC.
    let mut plan = match solve_linear_mpc(model, &belief.mean, cfg) {
        Ok(p) => p,
        Err(_) => {
            let n = model.n();
            let start = clamp_unit(&belief.mean);
            ControlPlan {
                inputs: vec![DVector::zeros(n); cfg.horizon() + 1],
                predicted_means: vec![start; cfg.horizon() + 1],
                surrogate_value: None,
            }
        }
    };
    plan.clip_to(model);
    Ok(DualStep { plan, scores, selected: None })
}

fn evaluate_candidate(
    model: &SystemModel,
    cfg: &DualControlConfig,
    belief: &Belief,
    sqrt_cov: &DMatrix<f64>,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Candidate>> {
    let start = if index == 0 {
        belief.mean.clone()
    } else {
        clamp_unit(&sample_gaussian(&belief.mean, sqrt_cov, rng))
    };
    let mut nominal = match solve_linear_mpc(model, &start, cfg) {
        Ok(p) => p,
        Err(Error::Numerical(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if index > 0 {
        for u in &mut nominal.inputs {
            *u = sample_gaussian(u, sqrt_cov, rng);
        }
        nominal.clip_to(model);
    }
    let frozen = covariance_along(model, &belief.cov, &nominal.predicted_means)?;
    let Some(lpv) = lpv_candidate(model, cfg, &nominal, &frozen)? else {
        return Ok(None);
    };
    let rollout = prediction_only_rollout(model, belief, &lpv.inputs)?;
    let score = surrogate_cost(&cfg.cost, &rollout, &lpv.inputs)?;
    let plan = ControlPlan { inputs: lpv.inputs, predicted_means: rollout.means, surrogate_value: Some(score) };
    Ok(Some(Candidate { plan, score }))
}
