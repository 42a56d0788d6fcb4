//! Extended Kalman filter for the running SOC estimate, and the
//! prediction-only covariance rollout the controller uses to score plans.
//!
//! The state transition is the identity plus a known input term, so the
//! transition Jacobian is `I` and only the observation Jacobian
//! `H = diag(h_i'(x_i))` varies with the operating point. Slopes and OCV values
//! are taken at the mean clamped to [0, 1]; the means themselves are not clamped.

use nalgebra::{DMatrix, DVector};

use crate::error::{contract, Error, Result};
use crate::linalg::{max_asymmetry, min_eigenvalue, symmetrize};
use crate::model::SystemModel;

/// Symmetry / PSD slack accepted on covariances.
pub const COV_TOL: f64 = 1e-10;

/// Information state: conditional mean and covariance of the SOC.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Belief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(contract(format!(
                "covariance is {}x{}, mean has length {n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(contract("belief contains non-finite values"));
        }
        if max_asymmetry(&cov) > COV_TOL {
            return Err(contract("belief covariance is not symmetric"));
        }
        if n > 0 && min_eigenvalue(&cov) < -COV_TOL {
            return Err(contract("belief covariance is not positive semi-definite"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Means and filtered covariances produced by [`prediction_only_rollout`].
///
/// Index `0` is the initial belief; both sequences have horizon + 1 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateRollout {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl SurrogateRollout {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn terminal_trace(&self) -> f64 {
        self.covs.last().map(|c| c.trace()).unwrap_or(0.0)
    }
}

/// `x' = x + diag(g) I`, `Σ' = Σ + Σ_w`.
pub fn ekf_time_update(model: &SystemModel, belief: &Belief, input: &DVector<f64>) -> Result<Belief> {
    model.check_dim(&belief.mean, "belief mean")?;
    model.check_input(input)?;
    let mean = model.drift(&belief.mean, input);
    let mut cov = &belief.cov + model.sigma_w();
    symmetrize(&mut cov);
    Ok(Belief { mean, cov })
}

/// Correct a predicted belief with the measurement `y`.
pub fn ekf_measurement_update(
    model: &SystemModel,
    predicted: &Belief,
    y: &DVector<f64>,
) -> Result<Belief> {
    model.check_dim(&predicted.mean, "predicted mean")?;
    model.check_dim(y, "measurement")?;
    let slopes = model.slopes_at(&predicted.mean);
    let gain = kalman_gain(model, &predicted.cov, &slopes)?;
    let innovation = y - model.ocv_at(&predicted.mean);
    let mean = &predicted.mean + &gain * innovation;
    let cov = corrected_cov(&predicted.cov, &gain, &slopes);
    Ok(Belief { mean, cov })
}

/// `Ω = Σ Hᵀ (H Σ Hᵀ + Σ_v)⁻¹`, computed with a Cholesky solve.
fn kalman_gain(model: &SystemModel, cov: &DMatrix<f64>, slopes: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = slopes.len();
    // H Σ with H diagonal.
    let mut h_cov = cov.clone();
    for i in 0..n {
        h_cov.row_mut(i).scale_mut(slopes[i]);
    }
    let mut innov_cov = h_cov.clone();
    for j in 0..n {
        innov_cov.column_mut(j).scale_mut(slopes[j]);
    }
    for i in 0..n {
        innov_cov[(i, i)] += model.sigma_v_diag()[i];
    }
    symmetrize(&mut innov_cov);
    // S Ωᵀ = H Σ. S is singular only without measurement noise; then the
    // pseudo-inverse gives the minimum-norm gain.
    if let Some(chol) = innov_cov.clone().cholesky() {
        return Ok(chol.solve(&h_cov).transpose());
    }
    let eps = 1e-12 * innov_cov.amax().max(1.0);
    innov_cov
        .svd(true, true)
        .solve(&h_cov, eps)
        .map(|g| g.transpose())
        .map_err(|e| Error::Numerical(format!("innovation covariance solve failed: {e}")))
}

/// `(I - Ω H) Σ`, then symmetrized.
fn corrected_cov(cov: &DMatrix<f64>, gain: &DMatrix<f64>, slopes: &DVector<f64>) -> DMatrix<f64> {
    let mut gain_h = gain.clone();
    for j in 0..slopes.len() {
        gain_h.column_mut(j).scale_mut(slopes[j]);
    }
    let mut out = cov - gain_h * cov;
    symmetrize(&mut out);
    out
}

/// Filtered covariances along a given mean trajectory, starting from `cov0`.
///
/// Entry `0` is `cov0`; entry `k + 1` is the time update `Σ + Σ_w` followed by
/// a measurement correction with slopes at `means[k + 1]`.
pub fn covariance_along(
    model: &SystemModel,
    cov0: &DMatrix<f64>,
    means: &[DVector<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let sigma_w = model.sigma_w();
    let mut covs = Vec::with_capacity(means.len());
    covs.push(cov0.clone());
    for mean in means.iter().skip(1) {
        let prior = covs.last().expect("non-empty") + &sigma_w;
        let slopes = model.slopes_at(mean);
        let gain = kalman_gain(model, &prior, &slopes)?;
        covs.push(corrected_cov(&prior, &gain, &slopes));
    }
    Ok(covs)
}

/// Open-loop means under `controls` from `init.mean`, paired with the
/// filtered covariances an EKF would reach if measurements arrived along
/// that mean path. The mean is never corrected.
///
/// `controls` has horizon + 1 entries; the last one does not move the state.
pub fn prediction_only_rollout(
    model: &SystemModel,
    init: &Belief,
    controls: &[DVector<f64>],
) -> Result<SurrogateRollout> {
    if controls.is_empty() {
        return Err(contract("rollout needs at least one control"));
    }
    model.check_dim(&init.mean, "initial mean")?;
    for u in controls {
        model.check_input(u)?;
    }
    let mut means = Vec::with_capacity(controls.len());
    means.push(init.mean.clone());
    for u in &controls[..controls.len() - 1] {
        let next = model.drift(means.last().expect("non-empty"), u);
        means.push(next);
    }
    let covs = covariance_along(model, &init.cov, &means)?;
    Ok(SurrogateRollout { means, covs })
}
