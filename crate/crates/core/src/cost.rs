//! Tracking / effort / uniformity costs.
//!
//! The stage cost on a sample is
//!
//! ```text
//! c (Qᵀx - r)² + Iᵀ R I + c0 Σ_{i<j} (x_i - x_j)²
//! ```
//!
//! and its expectation under `x ~ (mean, cov)` is exactly
//!
//! ```text
//! c (Qᵀm - r)² + c QᵀΣQ + Iᵀ R I + c0 Σ_{i<j} [Σ_ii - 2Σ_ij + Σ_jj + (m_i - m_j)²]
//! ```
//!
//! which is what [`conditional_stage_cost`] returns. The surrogate cost of a
//! plan is the sum of the conditional stage cost along a prediction-only
//! rollout.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::estimator::SurrogateRollout;
use crate::linalg::{min_eigenvalue, psd_sqrt, sample_gaussian};
use crate::model::TrueState;

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    /// Tracking weight.
    pub c: f64,
    /// Uniformity weight.
    pub c0: f64,
    /// Capacity vector `Q`.
    pub q_cap: DVector<f64>,
    /// Effort weight `R`, symmetric positive definite.
    pub r_weight: DMatrix<f64>,
    /// Reference `r_k`; the last value is held past the end of the sequence.
    pub reference: Vec<f64>,
    /// Horizon `N`; a plan covers `N + 1` steps.
    pub horizon: usize,
}

impl CostSpec {
    pub fn new(
        c: f64,
        c0: f64,
        q_cap: DVector<f64>,
        r_weight: DMatrix<f64>,
        reference: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let n = q_cap.len();
        if !(c >= 0.0 && c.is_finite()) || !(c0 >= 0.0 && c0.is_finite()) {
            return Err(Error::Config(format!("weights c={c}, c0={c0} must be finite and >= 0")));
        }
        if n == 0 || q_cap.iter().any(|q| !(*q > 0.0 && q.is_finite())) {
            return Err(Error::Config("capacity vector must be non-empty and positive".into()));
        }
        if r_weight.nrows() != n || r_weight.ncols() != n {
            return Err(Error::Config(format!("R must be {n}x{n}")));
        }
        if (&r_weight - r_weight.transpose()).amax() > 1e-12 || min_eigenvalue(&r_weight) <= 0.0 {
            return Err(Error::Config("R must be symmetric positive definite".into()));
        }
        if reference.is_empty() || reference.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("reference must be a non-empty finite sequence".into()));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(Self { c, c0, q_cap, r_weight, reference, horizon })
    }

    pub fn n(&self) -> usize {
        self.q_cap.len()
    }

    pub fn reference_at(&self, k: usize) -> f64 {
        *self.reference.get(k).unwrap_or_else(|| self.reference.last().expect("non-empty"))
    }

    /// The same spec with its reference re-indexed to start at `k0`.
    pub fn window(&self, k0: usize) -> Self {
        let reference = (k0..=k0 + self.horizon).map(|k| self.reference_at(k)).collect();
        Self { reference, ..self.clone() }
    }

    /// The same spec without the uniformity term.
    pub fn without_uniformity(&self) -> Self {
        Self { c0: 0.0, ..self.clone() }
    }
}

/// `Σ_{i<j} (x_i - x_j)²`.
pub fn pairwise_spread(x: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            let d = x[i] - x[j];
            acc += d * d;
        }
    }
    acc
}

/// `Σ_{i<j} (Σ_ii - 2Σ_ij + Σ_jj)`: the covariance part of the expected spread.
pub fn pairwise_spread_variance(cov: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.nrows() {
            acc += cov[(i, i)] - 2.0 * cov[(i, j)] + cov[(j, j)];
        }
    }
    acc
}

fn effort(spec: &CostSpec, input: &DVector<f64>) -> f64 {
    input.dot(&(&spec.r_weight * input))
}

pub fn stage_cost_sample(spec: &CostSpec, x: &DVector<f64>, input: &DVector<f64>, r: f64) -> f64 {
    let track = spec.q_cap.dot(x) - r;
    spec.c * track * track + effort(spec, input) + spec.c0 * pairwise_spread(x)
}

/// Covariance-only part of [`conditional_stage_cost`]: `c QᵀΣQ + c0 Σ_{i<j}(...)`.
pub fn covariance_penalty(spec: &CostSpec, cov: &DMatrix<f64>) -> f64 {
    spec.c * spec.q_cap.dot(&(cov * &spec.q_cap)) + spec.c0 * pairwise_spread_variance(cov)
}

pub fn conditional_stage_cost(
    spec: &CostSpec,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    input: &DVector<f64>,
    r: f64,
) -> f64 {
    stage_cost_sample(spec, mean, input, r) + covariance_penalty(spec, cov)
}

/// Deterministic surrogate: conditional stage costs summed along a rollout.
pub fn surrogate_cost(spec: &CostSpec, rollout: &SurrogateRollout, controls: &[DVector<f64>]) -> Result<f64> {
    if rollout.means.len() != controls.len() || rollout.covs.len() != controls.len() {
        return Err(contract(format!(
            "rollout has {} means / {} covariances but {} controls",
            rollout.means.len(),
            rollout.covs.len(),
            controls.len()
        )));
    }
    Ok(rollout
        .means
        .iter()
        .zip(&rollout.covs)
        .zip(controls)
        .enumerate()
        .map(|(k, ((m, s), u))| conditional_stage_cost(spec, m, s, u, spec.reference_at(k)))
        .sum())
}

/// Sample cost of a closed-loop run: stage costs on the true states and the
/// applied inputs, with reference index `k` for entry `k`.
pub fn realized_cost(spec: &CostSpec, truth_traj: &[TrueState], controls: &[DVector<f64>]) -> Result<f64> {
    if truth_traj.len() != controls.len() {
        return Err(contract(format!(
            "trajectory has {} states but {} controls",
            truth_traj.len(),
            controls.len()
        )));
    }
    Ok(truth_traj
        .iter()
        .zip(controls)
        .enumerate()
        .map(|(k, (x, u))| stage_cost_sample(spec, &x.soc, u, spec.reference_at(k)))
        .sum())
}

/// Sample mean of `f(x)` under `x ~ N(mean, cov)` and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl McEstimate {
    /// Number of standard errors separating the estimate from `value`.
    pub fn z_score(&self, value: f64) -> f64 {
        if self.std_err == 0.0 {
            if (self.mean - value).abs() <= 1e-12 * value.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - value).abs() / self.std_err
        }
    }
}

/// Monte Carlo expectation used to check the closed-form conditional costs.
pub fn gaussian_expectation<R, F>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    samples: usize,
    rng: &mut R,
    mut f: F,
) -> McEstimate
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>) -> f64,
{
    let sqrt = psd_sqrt(cov);
    // Welford accumulation.
    let mut avg = 0.0;
    let mut m2 = 0.0;
    for k in 0..samples {
        let x = sample_gaussian(mean, &sqrt, rng);
        let v = f(&x);
        let delta = v - avg;
        avg += delta / (k + 1) as f64;
        m2 += delta * (v - avg);
    }
    let var = if samples > 1 { m2 / (samples - 1) as f64 } else { 0.0 };
    McEstimate { mean: avg, std_err: (var / samples as f64).sqrt(), samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{prediction_only_rollout, Belief};
    use crate::model::{BatteryParams, OcvCurve, SystemModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize, c: f64, c0: f64, r: f64, horizon: usize) -> CostSpec {
        CostSpec::new(
            c,
            c0,
            DVector::from_element(n, 1.0),
            DMatrix::identity(n, n) * 0.1,
            vec![r],
            horizon,
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn stage_cost_examples() {
        let s = spec(3, 1.0, 1.0, 0.9, 1);
        let x = v(&[0.3, 0.3, 0.3]);
        assert!(stage_cost_sample(&s, &x, &DVector::zeros(3), 0.9).abs() < 1e-15);

        let s = spec(2, 1.0, 1.0, 1.0, 1);
        let got = stage_cost_sample(&s, &v(&[0.2, 0.4]), &v(&[1.0, 0.0]), 1.0);
        assert!((got - 0.3).abs() < 1e-14);

        let s = spec(2, 0.0, 0.0, 1.0, 1);
        let u = v(&[0.5, -0.7]);
        assert_eq!(stage_cost_sample(&s, &v(&[0.2, 0.9]), &u, 1.0), 0.1 * (0.25 + 0.49));
    }

    #[test]
    fn conditional_cost_examples() {
        let s = spec(2, 1.0, 1.0, 1.0, 1);
        let m = v(&[0.2, 0.4]);
        let u = v(&[1.0, 0.0]);
        assert_eq!(
            conditional_stage_cost(&s, &m, &DMatrix::zeros(2, 2), &u, 1.0),
            stage_cost_sample(&s, &m, &u, 1.0)
        );

        let s = spec(1, 1.0, 0.0, 1.0, 1);
        let got = conditional_stage_cost(&s, &v(&[0.3]), &DMatrix::from_element(1, 1, 0.5), &v(&[0.0]), 1.0);
        assert!((got - 0.99).abs() < 1e-14);
    }

    fn unit_model(curves: Vec<OcvCurve>) -> SystemModel {
        let n = curves.len();
        let batteries = curves
            .into_iter()
            .map(|ocv| BatteryParams { eta: 1.0, q_nom: 1.0, i_min: -1.0, i_max: 1.0, ocv })
            .collect();
        SystemModel::new(batteries, 1.0, vec![0.1; n], vec![0.1; n]).unwrap()
    }

    #[test]
    fn surrogate_single_step_is_one_stage() {
        let s = spec(2, 1.0, 1.0, 1.0, 1);
        let m = unit_model(vec![OcvCurve::linear(0.0, 1.0); 2]);
        let init = Belief::new(v(&[0.2, 0.5]), DMatrix::identity(2, 2) * 0.3).unwrap();
        let u = vec![v(&[0.1, 0.2])];
        let r = prediction_only_rollout(&m, &init, &u).unwrap();
        let got = surrogate_cost(&s, &r, &u).unwrap();
        assert_eq!(got, conditional_stage_cost(&s, &init.mean, &init.cov, &u[0], 1.0));
    }

    #[test]
    fn flat_curve_never_cheaper_than_identity() {
        let s = spec(2, 1.0, 1.0, 1.0, 6);
        let flat = unit_model(vec![OcvCurve::constant(1.0); 2]);
        let ident = unit_model(vec![OcvCurve::linear(0.0, 1.0); 2]);
        let init = Belief::new(v(&[0.2, 0.5]), DMatrix::identity(2, 2) * 0.3).unwrap();
        let u: Vec<_> = (0..7).map(|k| v(&[0.05 * k as f64 / 7.0, -0.02])).collect();
        let jf = surrogate_cost(&s, &prediction_only_rollout(&flat, &init, &u).unwrap(), &u).unwrap();
        let ji = surrogate_cost(&s, &prediction_only_rollout(&ident, &init, &u).unwrap(), &u).unwrap();
        assert!(jf >= ji);
    }

    #[test]
    fn surrogate_static_point() {
        let n = 3;
        let s = spec(n, 1.0, 1.0, 1.0, 8);
        let batteries = (0..n)
            .map(|_| BatteryParams {
                eta: 1.0,
                q_nom: 1.0,
                i_min: -1.0,
                i_max: 1.0,
                ocv: OcvCurve::linear(0.0, 1.0),
            })
            .collect();
        let m = SystemModel::new(batteries, 1.0, vec![0.0; n], vec![0.1; n]).unwrap();
        let x0 = v(&[0.1, 0.2, 0.4]);
        let init = Belief::new(x0.clone(), DMatrix::zeros(n, n)).unwrap();
        let u = vec![DVector::zeros(n); 9];
        let r = prediction_only_rollout(&m, &init, &u).unwrap();
        let got = surrogate_cost(&s, &r, &u).unwrap();
        let expect = 9.0 * stage_cost_sample(&s, &x0, &DVector::zeros(n), 1.0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn length_mismatches_are_contract_errors() {
        let s = spec(1, 1.0, 0.0, 1.0, 1);
        let r = SurrogateRollout { means: vec![v(&[0.1])], covs: vec![DMatrix::zeros(1, 1)] };
        assert!(matches!(surrogate_cost(&s, &r, &[]), Err(Error::Contract(_))));
        let traj = vec![TrueState::clamped(v(&[0.1]))];
        assert!(matches!(realized_cost(&s, &traj, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn realized_cost_fixture() {
        let s = spec(1, 1.0, 0.0, 1.0, 1);
        assert_eq!(
            realized_cost(&s, &[TrueState::clamped(v(&[1.0]))], &[v(&[0.0])]).unwrap(),
            0.0
        );
        // x = 0.2, 0.5, 0.9 under inputs 0.3, 0.4, 0.0 with r = 1, R = 0.1:
        // 0.64 + 0.009, 0.25 + 0.016, 0.01 + 0.
        let traj: Vec<_> = [0.2, 0.5, 0.9].iter().map(|x| TrueState::clamped(v(&[*x]))).collect();
        let u = vec![v(&[0.3]), v(&[0.4]), v(&[0.0])];
        let got = realized_cost(&s, &traj, &u).unwrap();
        assert!((got - (0.649 + 0.266 + 0.01)).abs() < 1e-12);
        let by_stage: f64 = traj.iter().zip(&u).map(|(x, u)| stage_cost_sample(&s, &x.soc, u, 1.0)).sum();
        assert_eq!(got, by_stage);
    }

    #[test]
    fn reference_window_holds_last_value() {
        let mut s = spec(1, 1.0, 0.0, 1.0, 2);
        s.reference = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(s.window(1).reference, vec![0.2, 0.3, 0.4]);
        assert_eq!(s.window(3).reference, vec![0.4, 0.4, 0.4]);
    }

    #[test]
    fn spec_validation() {
        let q = DVector::from_element(2, 1.0);
        let r = DMatrix::identity(2, 2);
        assert!(CostSpec::new(-1.0, 0.0, q.clone(), r.clone(), vec![1.0], 1).is_err());
        assert!(CostSpec::new(1.0, 0.0, q.clone(), r.clone(), vec![1.0], 0).is_err());
        assert!(CostSpec::new(1.0, 0.0, q.clone(), r.clone(), vec![], 1).is_err());
        assert!(CostSpec::new(1.0, 0.0, q.clone(), DMatrix::zeros(2, 2), vec![1.0], 1).is_err());
        assert!(CostSpec::new(1.0, 0.0, v(&[1.0, 0.0]), r, vec![1.0], 1).is_err());
    }

    #[test]
    fn conditional_cost_matches_sampling_small() {
        let s = spec(2, 1.0, 1.0, 1.0, 1);
        let mean = v(&[0.3, 0.6]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let u = v(&[0.1, -0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = gaussian_expectation(&mean, &cov, 200_000, &mut rng, |x| stage_cost_sample(&s, x, &u, 1.0));
        let exact = conditional_stage_cost(&s, &mean, &cov, &u, 1.0);
        assert!(est.z_score(exact) < 3.0, "{est:?} vs {exact}");
    }
}
