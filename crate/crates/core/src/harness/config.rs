//! JSON experiment configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::estimator::Belief;
use crate::model::{presets, BatteryParams, OcvCurve, SystemModel};
use crate::mpc::DualControlConfig;
use crate::qp::{DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub batteries: Vec<BatteryParams>,
    pub dt: f64,
    pub sigma_w_diag: Vec<f64>,
    pub sigma_v_diag: Vec<f64>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<SystemModel> {
        SystemModel::new(self.batteries.clone(), self.dt, self.sigma_w_diag.clone(), self.sigma_v_diag.clone())
    }
}

/// A scalar reference or a per-step sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reference {
    Constant(f64),
    Sequence(Vec<f64>),
}

impl Reference {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            Reference::Constant(r) => vec![*r],
            Reference::Sequence(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub c: f64,
    pub c0: f64,
    pub q_cap: Vec<f64>,
    pub r_weight_diag: Vec<f64>,
    pub reference: Reference,
    pub horizon: usize,
}

impl CostConfig {
    pub fn build(&self) -> Result<CostSpec> {
        if self.r_weight_diag.len() != self.q_cap.len() {
            return Err(Error::Config("r_weight_diag and q_cap must have the same length".into()));
        }
        CostSpec::new(
            self.c,
            self.c0,
            DVector::from_vec(self.q_cap.clone()),
            DMatrix::from_diagonal(&DVector::from_vec(self.r_weight_diag.clone())),
            self.reference.to_vec(),
            self.horizon,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    pub num_candidates: usize,
    #[serde(default = "default_tol")]
    pub qp_tol: f64,
    #[serde(default = "default_max_iter")]
    pub qp_max_iter: usize,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl Default for DualConfig {
    fn default() -> Self {
        Self { num_candidates: 35, qp_tol: DEFAULT_TOL, qp_max_iter: DEFAULT_MAX_ITER }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    LinearMpc,
    Dual,
}

impl Controller {
    pub fn as_str(self) -> &'static str {
        match self {
            Controller::LinearMpc => "linear-mpc",
            Controller::Dual => "dual",
        }
    }
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which arms to run: one controller or both, paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerChoice {
    LinearMpc,
    Dual,
    Both,
}

impl ControllerChoice {
    pub fn arms(self) -> Vec<Controller> {
        match self {
            ControllerChoice::LinearMpc => vec![Controller::LinearMpc],
            ControllerChoice::Dual => vec![Controller::Dual],
            ControllerChoice::Both => vec![Controller::LinearMpc, Controller::Dual],
        }
    }
}

impl FromStr for ControllerChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear-mpc" => Ok(Self::LinearMpc),
            "dual" => Ok(Self::Dual),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown controller '{other}' (expected linear-mpc, dual or both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub cost: CostConfig,
    pub initial_mean: Vec<f64>,
    /// Full initial covariance, row-major nested lists.
    pub initial_cov: Vec<Vec<f64>>,
    /// Closed-loop steps `T`; a run has `T + 1` stages.
    pub steps: usize,
    pub runs: usize,
    pub controller: ControllerChoice,
    #[serde(default)]
    pub dual: DualConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_owned(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Three-battery reference experiment: SOC starts at 0.05 with variance
    /// 0.5, noise variances 0.1, c = c0 = 1, Q = 1, R = 0.1 I, r = 1, N = 8,
    /// T = 50, L = 35, 100 runs.
    pub fn three_battery_default() -> Self {
        let batteries = presets::three_curves()
            .into_iter()
            .map(|ocv: OcvCurve| BatteryParams { eta: 1.0, q_nom: 1.0, i_min: -1.0, i_max: 1.0, ocv })
            .collect();
        Self {
            model: ModelConfig { batteries, dt: 1.0, sigma_w_diag: vec![0.1; 3], sigma_v_diag: vec![0.1; 3] },
            cost: CostConfig {
                c: 1.0,
                c0: 1.0,
                q_cap: vec![1.0; 3],
                r_weight_diag: vec![0.1; 3],
                reference: Reference::Constant(1.0),
                horizon: 8,
            },
            initial_mean: vec![0.05; 3],
            initial_cov: (0..3).map(|i| (0..3).map(|j| if i == j { 0.5 } else { 0.0 }).collect()).collect(),
            steps: 50,
            runs: 100,
            controller: ControllerChoice::Both,
            dual: DualConfig::default(),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Build the typed objects the simulation consumes.
    pub fn resolve(&self) -> Result<Resolved> {
        let model = self.model.build()?;
        let cost = self.cost.build()?;
        let n = model.n();
        if cost.n() != n {
            return Err(Error::Config(format!("cost has dimension {}, model has {n} batteries", cost.n())));
        }
        if self.initial_mean.len() != n || self.initial_cov.len() != n || self.initial_cov.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("initial mean / covariance must have dimension {n}")));
        }
        if self.steps == 0 || self.runs == 0 {
            return Err(Error::Config("steps and runs must be at least 1".into()));
        }
        if !(self.dual.qp_tol > 0.0) || self.dual.qp_max_iter == 0 {
            return Err(Error::Config("qp_tol must be positive and qp_max_iter non-zero".into()));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| self.initial_cov[i][j]);
        let initial = Belief::new(DVector::from_vec(self.initial_mean.clone()), cov)
            .map_err(|e| Error::Config(format!("initial belief: {e}")))?;
        let mut controller = DualControlConfig::new(self.dual.num_candidates, cost)?;
        controller.qp_tol = self.dual.qp_tol;
        controller.qp_max_iter = self.dual.qp_max_iter;
        Ok(Resolved { model, controller, initial, steps: self.steps })
    }
}

/// Validated, typed view of an [`ExperimentConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: SystemModel,
    pub controller: DualControlConfig,
    pub initial: Belief,
    pub steps: usize,
}
