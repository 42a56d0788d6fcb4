//! Battery plant: Coulomb-counting SOC dynamics and polynomial OCV curves.
//!
//! Positive current charges the battery: `soc' = soc + (eta * dt / q_nom) * I + w`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::standard_normals;

/// Slack allowed on the SOC domain before evaluation is refused.
pub const DOMAIN_SLACK: f64 = 1e-12;

/// Slack on input bounds for plant stepping.
pub const INPUT_SLACK: f64 = 1e-9;

/// Grid size of the load-time monotonicity check.
pub const MONOTONE_GRID: usize = 1001;

/// Open-circuit voltage as a polynomial in SOC, `h(s) = Σ a_j s^j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OcvCurve {
    coeffs: Vec<f64>,
}

impl OcvCurve {
    /// Build a curve and require `h'(s) >= 0` on the monotonicity grid.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        Self::with_slope_floor(coeffs, 0.0)
    }

    /// Like [`OcvCurve::new`] but accepts slopes down to `-slope_floor`.
    pub fn with_slope_floor(coeffs: Vec<f64>, slope_floor: f64) -> Result<Self> {
        let curve = Self::unchecked(coeffs)?;
        for k in 0..MONOTONE_GRID {
            let s = k as f64 / (MONOTONE_GRID - 1) as f64;
            let d = curve.slope_unchecked(s);
            if d < -slope_floor {
                return Err(Error::Config(format!(
                    "OCV curve {:?} is not monotone: slope {d} at soc {s}",
                    curve.coeffs
                )));
            }
        }
        Ok(curve)
    }

    /// Build a curve without the monotonicity check (coefficients must still be finite).
    pub fn unchecked(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Config("OCV curve needs at least one coefficient".into()));
        }
        if coeffs.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config(format!("OCV coefficients must be finite: {coeffs:?}")));
        }
        Ok(Self { coeffs })
    }

    pub fn linear(offset: f64, slope: f64) -> Self {
        Self { coeffs: vec![offset, slope] }
    }

    pub fn constant(value: f64) -> Self {
        Self { coeffs: vec![value] }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// True when the curve has degree at most one, i.e. the EKF is exact.
    pub fn is_affine(&self) -> bool {
        self.coeffs.iter().skip(2).all(|a| *a == 0.0)
    }

    pub fn eval(&self, soc: f64) -> Result<f64> {
        check_domain(soc)?;
        Ok(self.eval_unchecked(soc))
    }

    pub fn slope(&self, soc: f64) -> Result<f64> {
        check_domain(soc)?;
        Ok(self.slope_unchecked(soc))
    }

    fn eval_unchecked(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, a| acc * s + a)
    }

    fn slope_unchecked(&self, s: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (j, a)| acc * s + j as f64 * a)
    }
}

impl TryFrom<Vec<f64>> for OcvCurve {
    type Error = Error;

    fn try_from(coeffs: Vec<f64>) -> Result<Self> {
        Self::new(coeffs)
    }
}

impl From<OcvCurve> for Vec<f64> {
    fn from(c: OcvCurve) -> Self {
        c.coeffs
    }
}

fn check_domain(soc: f64) -> Result<()> {
    if !(soc >= -DOMAIN_SLACK && soc <= 1.0 + DOMAIN_SLACK) {
        return Err(Error::Domain(soc));
    }
    Ok(())
}

pub fn ocv_eval(curve: &OcvCurve, soc: f64) -> Result<f64> {
    curve.eval(soc)
}

pub fn ocv_slope(curve: &OcvCurve, soc: f64) -> Result<f64> {
    curve.slope(soc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    /// Coulombic efficiency in (0, 1].
    pub eta: f64,
    /// Nominal capacity in ampere-hours.
    pub q_nom: f64,
    pub i_min: f64,
    pub i_max: f64,
    #[serde(rename = "ocv_coeffs")]
    pub ocv: OcvCurve,
}

impl BatteryParams {
    pub fn gain(&self, dt: f64) -> f64 {
        self.eta * dt / self.q_nom
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("battery {index}: eta {} not in (0, 1]", self.eta)));
        }
        if !(self.q_nom > 0.0 && self.q_nom.is_finite()) {
            return Err(Error::Config(format!("battery {index}: q_nom {} must be positive", self.q_nom)));
        }
        if !(self.i_min < self.i_max) || !self.i_min.is_finite() || !self.i_max.is_finite() {
            return Err(Error::Config(format!(
                "battery {index}: need finite i_min < i_max, got [{}, {}]",
                self.i_min, self.i_max
            )));
        }
        Ok(())
    }
}

/// The `n`-battery plant: dynamics, observation curves and noise levels.
#[derive(Debug, Clone)]
pub struct SystemModel {
    batteries: Vec<BatteryParams>,
    dt: f64,
    sigma_w: DVector<f64>,
    sigma_v: DVector<f64>,
    gains: DVector<f64>,
}

impl SystemModel {
    /// `sigma_w_diag` and `sigma_v_diag` are the diagonals of the process and
    /// measurement noise covariances.
    pub fn new(
        batteries: Vec<BatteryParams>,
        dt: f64,
        sigma_w_diag: Vec<f64>,
        sigma_v_diag: Vec<f64>,
    ) -> Result<Self> {
        let n = batteries.len();
        if n == 0 {
            return Err(Error::Config("at least one battery is required".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if sigma_w_diag.len() != n || sigma_v_diag.len() != n {
            return Err(Error::Config(format!(
                "noise diagonals must have length {n}, got {} and {}",
                sigma_w_diag.len(),
                sigma_v_diag.len()
            )));
        }
        if sigma_w_diag.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("process noise variances must be >= 0".into()));
        }
        if sigma_v_diag.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("measurement noise variances must be >= 0".into()));
        }
        for (i, b) in batteries.iter().enumerate() {
            b.validate(i)?;
        }
        let gains = DVector::from_iterator(n, batteries.iter().map(|b| b.gain(dt)));
        Ok(Self {
            batteries,
            dt,
            sigma_w: DVector::from_vec(sigma_w_diag),
            sigma_v: DVector::from_vec(sigma_v_diag),
            gains,
        })
    }

    pub fn n(&self) -> usize {
        self.batteries.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn batteries(&self) -> &[BatteryParams] {
        &self.batteries
    }

    /// Per-battery Coulomb-counting gains `eta * dt / q_nom`.
    pub fn gains(&self) -> &DVector<f64> {
        &self.gains
    }

    pub fn sigma_w_diag(&self) -> &DVector<f64> {
        &self.sigma_w
    }

    pub fn sigma_v_diag(&self) -> &DVector<f64> {
        &self.sigma_v
    }

    pub fn sigma_w(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.sigma_w)
    }

    pub fn sigma_v(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.sigma_v)
    }

    pub fn input_lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.batteries.iter().map(|b| b.i_min))
    }

    pub fn input_upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.batteries.iter().map(|b| b.i_max))
    }

    /// Noise-free dynamics `x + diag(g) I` (no clamping).
    pub fn drift(&self, x: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        x + self.gains.component_mul(input)
    }

    /// Stacked OCV `h(x)` for estimator use. Outside [0, 1] each curve is
    /// continued by its tangent at the nearest end.
    pub fn ocv_at(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.batteries.iter().zip(x.iter()).map(|(b, &s)| {
                let edge = s.clamp(0.0, 1.0);
                b.ocv.eval_unchecked(edge) + b.ocv.slope_unchecked(edge) * (s - edge)
            }),
        )
    }

    /// Diagonal of the observation Jacobian at `x` clamped to [0, 1].
    pub fn slopes_at(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.batteries
                .iter()
                .zip(x.iter())
                .map(|(b, s)| b.ocv.slope_unchecked(s.clamp(0.0, 1.0))),
        )
    }

    pub fn check_input(&self, input: &DVector<f64>) -> Result<()> {
        self.check_dim(input, "input")?;
        for (i, (b, u)) in self.batteries.iter().zip(input.iter()).enumerate() {
            if !(*u >= b.i_min - INPUT_SLACK && *u <= b.i_max + INPUT_SLACK) {
                return Err(contract(format!(
                    "input {u} for battery {i} outside [{}, {}]",
                    b.i_min, b.i_max
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.n() {
            return Err(contract(format!("{what} has length {}, expected {}", v.len(), self.n())));
        }
        Ok(())
    }

    /// Draw a process-noise vector `w ~ N(0, Σ_w)`; always consumes `n` normals.
    pub fn sample_process_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        standard_normals(self.n(), rng).component_mul(&self.sigma_w.map(f64::sqrt))
    }

    /// Draw a measurement-noise vector `v ~ N(0, Σ_v)`; always consumes `n` normals.
    pub fn sample_measurement_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        standard_normals(self.n(), rng).component_mul(&self.sigma_v.map(f64::sqrt))
    }

    /// Deterministic part of [`step_truth`] with an explicit noise vector.
    pub fn propagate(
        &self,
        state: &TrueState,
        input: &DVector<f64>,
        noise: &DVector<f64>,
    ) -> Result<TrueState> {
        self.check_dim(&state.soc, "state")?;
        self.check_input(input)?;
        self.check_dim(noise, "process noise")?;
        let next = (self.drift(&state.soc, input) + noise).map(|s| s.clamp(0.0, 1.0));
        Ok(TrueState { soc: next })
    }

    pub fn measure(&self, state: &TrueState, noise: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(&state.soc, "state")?;
        self.check_dim(noise, "measurement noise")?;
        let mut y = DVector::zeros(self.n());
        for (i, b) in self.batteries.iter().enumerate() {
            y[i] = b.ocv.eval(state.soc[i])? + noise[i];
        }
        Ok(y)
    }
}

/// True (physical) SOC vector, always inside [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TrueState {
    pub soc: DVector<f64>,
}

impl TrueState {
    pub fn new(soc: DVector<f64>) -> Result<Self> {
        if soc.iter().any(|s| !(*s >= 0.0 && *s <= 1.0)) {
            return Err(Error::Domain(
                soc.iter().copied().find(|s| !(*s >= 0.0 && *s <= 1.0)).unwrap_or(f64::NAN),
            ));
        }
        Ok(Self { soc })
    }

    pub fn clamped(soc: DVector<f64>) -> Self {
        Self { soc: soc.map(|s| s.clamp(0.0, 1.0)) }
    }
}

/// Advance the plant one step: `clamp(soc + diag(g) I + w, 0, 1)`.
pub fn step_truth<R: Rng + ?Sized>(
    model: &SystemModel,
    state: &TrueState,
    input: &DVector<f64>,
    rng: &mut R,
) -> Result<TrueState> {
    model.check_input(input)?;
    let w = model.sample_process_noise(rng);
    model.propagate(state, input, &w)
}

/// Noisy terminal voltages `h(soc) + v`.
pub fn observe<R: Rng + ?Sized>(
    model: &SystemModel,
    state: &TrueState,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let v = model.sample_measurement_noise(rng);
    model.measure(state, &v)
}

/// Built-in OCV curves for a three-battery pack with different chemistries.
///
/// These are qualitative stand-ins: a near-linear cell, an S-shaped cell with
/// a flat mid-range plateau, and a cell that is steep at both ends with a wide
/// flat middle.
pub mod presets {
    use super::*;

    /// `h'(s) = 3 - 0.6 s + 0.6 s^2`, between 2.85 and 3.
    pub fn near_linear() -> OcvCurve {
        OcvCurve::new(vec![3.0, 3.0, -0.3, 0.2]).expect("monotone preset")
    }

    /// `h'(s) = 22.8 (s - 1/2)^2 + 0.3`; the plateau slope is 5% of the peak.
    pub fn plateau() -> OcvCurve {
        // 1.7 + 0.3 s + 7.6 ((s - 1/2)^3 + 1/8), expanded.
        OcvCurve::new(vec![1.7, 6.0, -11.4, 7.6]).expect("monotone preset")
    }

    /// `h'(s) = 4 (2s - 1)^8 + 0.02`: about 4 at either end, nearly flat
    /// over the middle half.
    pub fn steep_ends() -> OcvCurve {
        // 1.5 + 0.02 s + (2/9) ((2s - 1)^9 + 1), expanded.
        OcvCurve::new(vec![
            1.5,
            4.02,
            -32.0,
            448.0 / 3.0,
            -448.0,
            896.0,
            -3584.0 / 3.0,
            1024.0,
            -512.0,
            1024.0 / 9.0,
        ])
        .expect("monotone preset")
    }

    pub fn three_curves() -> Vec<OcvCurve> {
        vec![near_linear(), plateau(), steep_ends()]
    }

    /// Three unit cells (`eta = dt = q_nom = 1`), inputs in [-1, 1], noise
    /// variances 0.1 on both channels.
    pub fn three_battery_model() -> SystemModel {
        let batteries = three_curves()
            .into_iter()
            .map(|ocv| BatteryParams { eta: 1.0, q_nom: 1.0, i_min: -1.0, i_max: 1.0, ocv })
            .collect();
        SystemModel::new(batteries, 1.0, vec![0.1; 3], vec![0.1; 3]).expect("valid preset")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_model(curves: Vec<OcvCurve>, w: f64, v: f64) -> SystemModel {
        let n = curves.len();
        let batteries = curves
            .into_iter()
            .map(|ocv| BatteryParams { eta: 1.0, q_nom: 1.0, i_min: -1.0, i_max: 1.0, ocv })
            .collect();
        SystemModel::new(batteries, 1.0, vec![w; n], vec![v; n]).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(ocv_eval(&OcvCurve::constant(2.0), 0.5).unwrap(), 2.0);
        assert_eq!(ocv_eval(&OcvCurve::linear(0.0, 1.0), 0.3).unwrap(), 0.3);
        let c = OcvCurve::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!((ocv_eval(&c, 0.5).unwrap() - 2.75).abs() < 1e-15);
    }

    #[test]
    fn slope_examples() {
        assert_eq!(ocv_slope(&OcvCurve::constant(2.0), 0.7).unwrap(), 0.0);
        for s in [0.0, 0.25, 1.0] {
            assert_eq!(ocv_slope(&OcvCurve::linear(0.0, 1.0), s).unwrap(), 1.0);
        }
        let c = OcvCurve::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!((ocv_slope(&c, 0.5).unwrap() - 5.0).abs() < 1e-15);
        let h = 1e-6;
        let fd = (c.eval(0.5 + h).unwrap() - c.eval(0.5 - h).unwrap()) / (2.0 * h);
        assert!((fd - 5.0).abs() < 1e-8);
    }

    #[test]
    fn domain_errors() {
        let c = OcvCurve::linear(0.0, 1.0);
        assert!(matches!(c.eval(-1e-6), Err(Error::Domain(_))));
        assert!(matches!(c.slope(1.0 + 1e-6), Err(Error::Domain(_))));
        assert!(c.eval(1.0 + 1e-13).is_ok());
        assert!(c.eval(f64::NAN).is_err());
    }

    #[test]
    fn non_monotone_curve_rejected() {
        let err = OcvCurve::new(vec![0.0, -1.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(OcvCurve::with_slope_floor(vec![0.0, -0.01], 0.1).is_ok());
        assert!(OcvCurve::new(vec![]).is_err());
    }

    #[test]
    fn presets_are_monotone_and_shaped() {
        for c in presets::three_curves() {
            let mut prev = f64::NEG_INFINITY;
            for k in 0..MONOTONE_GRID {
                let v = c.eval(k as f64 / 1000.0).unwrap();
                assert!(v >= prev);
                prev = v;
            }
        }
        let p = presets::plateau();
        let ratio = p.slope(0.5).unwrap() / p.slope(0.0).unwrap();
        assert!((0.03..0.07).contains(&ratio), "plateau ratio {ratio}");
    }

    #[test]
    fn slope_matches_finite_difference_on_presets() {
        for c in presets::three_curves() {
            for k in 0..=100 {
                // Five-point central stencil; the two-point one loses too much
                // to roundoff on the high-degree preset.
                let h = 1e-4;
                let s = (k as f64 / 100.0).clamp(2.0 * h, 1.0 - 2.0 * h);
                let f = |x: f64| c.eval(x).unwrap();
                let fd = (f(s - 2.0 * h) - 8.0 * f(s - h) + 8.0 * f(s + h) - f(s + 2.0 * h)) / (12.0 * h);
                let an = c.slope(s).unwrap();
                assert!((fd - an).abs() <= 1e-8 * an.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn step_truth_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m3 = unit_model(vec![OcvCurve::linear(0.0, 1.0); 3], 0.0, 0.1);
        let x = TrueState::new(DVector::from_element(3, 0.05)).unwrap();
        let next = step_truth(&m3, &x, &DVector::zeros(3), &mut rng).unwrap();
        assert_eq!(next, x);

        let m1 = unit_model(vec![OcvCurve::linear(0.0, 1.0)], 0.0, 0.1);
        let x = TrueState::new(DVector::from_element(1, 0.2)).unwrap();
        let next = step_truth(&m1, &x, &DVector::from_element(1, 0.1), &mut rng).unwrap();
        assert!((next.soc[0] - 0.3).abs() < 1e-15);

        let x = TrueState::new(DVector::from_element(1, 0.9)).unwrap();
        let next = step_truth(&m1, &x, &DVector::from_element(1, 0.5), &mut rng).unwrap();
        assert_eq!(next.soc[0], 1.0);
    }

    #[test]
    fn step_truth_rejects_out_of_bounds_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m1 = unit_model(vec![OcvCurve::linear(0.0, 1.0)], 0.0, 0.1);
        let x = TrueState::new(DVector::from_element(1, 0.2)).unwrap();
        let err = step_truth(&m1, &x, &DVector::from_element(1, 1.5), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(step_truth(&m1, &x, &DVector::from_element(1, 1.0 + 1e-10), &mut rng).is_ok());
    }

    #[test]
    fn observe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = unit_model(vec![OcvCurve::linear(0.0, 1.0); 2], 0.0, 1e-300);
        let x = TrueState::new(DVector::from_vec(vec![0.4, 0.6])).unwrap();
        let y = m.measure(&x, &DVector::zeros(2)).unwrap();
        assert_eq!(y, DVector::from_vec(vec![0.4, 0.6]));

        let m = unit_model(vec![OcvCurve::new(vec![1.0, 2.0, 3.0]).unwrap()], 0.0, 0.1);
        let x = TrueState::new(DVector::from_element(1, 0.5)).unwrap();
        assert!((m.measure(&x, &DVector::zeros(1)).unwrap()[0] - 2.75).abs() < 1e-15);

        let draws = 100_000;
        let mean = (0..draws).map(|_| observe(&m, &x, &mut rng).unwrap()[0]).sum::<f64>()
            / draws as f64;
        assert!((mean - 2.75).abs() < 3.0 * (0.1f64 / draws as f64).sqrt());
    }

    #[test]
    fn noiseless_plant_is_deterministic() {
        let m = unit_model(presets::three_curves(), 0.0, 0.1);
        let x = TrueState::new(DVector::from_vec(vec![0.1, 0.5, 0.9])).unwrap();
        let u = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let a = step_truth(&m, &x, &u, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = step_truth(&m, &x, &u, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_validation() {
        let b = BatteryParams { eta: 1.0, q_nom: 1.0, i_min: -1.0, i_max: 1.0, ocv: OcvCurve::linear(0.0, 1.0) };
        assert!(SystemModel::new(vec![], 1.0, vec![], vec![]).is_err());
        assert!(SystemModel::new(vec![b.clone()], 1.0, vec![0.1], vec![-0.1]).is_err());
        assert!(SystemModel::new(vec![b.clone()], 1.0, vec![0.0], vec![0.0]).is_ok());
        assert!(SystemModel::new(vec![b.clone()], 1.0, vec![-0.1], vec![0.1]).is_err());
        assert!(SystemModel::new(vec![b.clone()], 0.0, vec![0.1], vec![0.1]).is_err());
        assert!(SystemModel::new(vec![b.clone()], 1.0, vec![0.1, 0.1], vec![0.1]).is_err());
        let bad = BatteryParams { i_min: 1.0, ..b.clone() };
        assert!(SystemModel::new(vec![bad], 1.0, vec![0.1], vec![0.1]).is_err());
        let bad = BatteryParams { eta: 1.5, ..b };
        assert!(SystemModel::new(vec![bad], 1.0, vec![0.1], vec![0.1]).is_err());
    }

    #[test]
    fn estimator_ocv_is_tangent_continued() {
        let m = unit_model(vec![OcvCurve::new(vec![1.0, 2.0, 3.0]).unwrap()], 0.1, 0.1);
        let at = |s: f64| m.ocv_at(&DVector::from_element(1, s))[0];
        assert!((at(0.5) - 2.75).abs() < 1e-15);
        assert!((at(-0.25) - (1.0 - 0.5)).abs() < 1e-15);
        assert!((at(1.5) - (6.0 + 8.0 * 0.5)).abs() < 1e-15);
    }
}
