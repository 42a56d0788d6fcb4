//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ uᵀ H u + gᵀ u
//! subject to  A u ≤ b,  lower ≤ u ≤ upper
//! ```
//!
//! with an operator-splitting (ADMM) iteration on the stacked constraint
//! matrix `C = [A; I]`, over-relaxation, and a penalty that is rescaled every
//! [`QpSettings::adapt_interval`] iterations. Once the residuals are small the
//! solver guesses the active set from the dual iterate and solves the reduced
//! KKT system directly ("polishing"); a polished point is only accepted if it
//! satisfies the KKT conditions to the requested tolerance.

use nalgebra::{DMatrix, DVector};

use crate::error::{contract, Result};
use crate::linalg::inf_norm;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Symmetric PSD quadratic term `H` (objective is `½ uᵀHu + gᵀu`).
    pub hess: DMatrix<f64>,
    pub grad: DVector<f64>,
    /// `p × m` inequality matrix `A` in `A u ≤ b`; `p` may be zero.
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    /// Box bounds, entries may be infinite.
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        hess: DMatrix<f64>,
        grad: DVector<f64>,
        ineq_mat: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let m = grad.len();
        if hess.nrows() != m || hess.ncols() != m {
            return Err(contract(format!("hessian must be {m}x{m}")));
        }
        if ineq_mat.ncols() != m || ineq_mat.nrows() != ineq_rhs.len() {
            return Err(contract("inequality matrix / rhs dimensions disagree"));
        }
        if lower.len() != m || upper.len() != m {
            return Err(contract("bound vectors must match the number of variables"));
        }
        if (&hess - hess.transpose()).amax() > 1e-10 {
            return Err(contract("hessian is not symmetric"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(contract("lower bound exceeds upper bound"));
        }
        if hess.iter().chain(grad.iter()).chain(ineq_mat.iter()).any(|v| !v.is_finite()) {
            return Err(contract("problem data must be finite"));
        }
        if ineq_rhs.iter().any(|v| v.is_nan()) {
            return Err(contract("inequality rhs contains NaN"));
        }
        Ok(Self { hess, grad, ineq_mat, ineq_rhs, lower, upper })
    }

    /// Box-constrained problem without general inequalities.
    pub fn boxed(hess: DMatrix<f64>, grad: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        let m = grad.len();
        Self::new(hess, grad, DMatrix::zeros(0, m), DVector::zeros(0), lower, upper)
    }

    pub fn num_vars(&self) -> usize {
        self.grad.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hess * u)) + self.grad.dot(u)
    }

    /// Largest violation of `A u ≤ b` and the box.
    pub fn infeasibility(&self, u: &DVector<f64>) -> f64 {
        let au = &self.ineq_mat * u;
        let rows = au.iter().zip(self.ineq_rhs.iter()).map(|(a, b)| (a - b).max(0.0));
        let boxv = u
            .iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(x, (l, h))| (l - x).max(x - h).max(0.0));
        rows.chain(boxv).fold(0.0, f64::max)
    }

    fn stacked(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let (p, m) = (self.num_ineq(), self.num_vars());
        let mut c = DMatrix::zeros(p + m, m);
        c.rows_mut(0, p).copy_from(&self.ineq_mat);
        c.rows_mut(p, m).fill_with_identity();
        let mut lo = DVector::from_element(p + m, f64::NEG_INFINITY);
        let mut hi = DVector::zeros(p + m);
        hi.rows_mut(0, p).copy_from(&self.ineq_rhs);
        lo.rows_mut(p, m).copy_from(&self.lower);
        hi.rows_mut(p, m).copy_from(&self.upper);
        (c, lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub point: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Multipliers of the stacked constraints `[A; I]` (positive on upper
    /// bounds, negative on lower bounds); usable as a warm start.
    pub dual: DVector<f64>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub adapt_interval: usize,
    pub polish: bool,
    pub infeasibility_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adapt_interval: 25,
            polish: true,
            infeasibility_tol: 1e-5,
        }
    }
}

impl QpSettings {
    pub fn with_tol(tol: f64, max_iter: usize) -> Self {
        Self { tol, max_iter, ..Self::default() }
    }
}

/// Solve with default penalty settings, tolerance `tol` and at most `max_iter` iterations.
pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    AdmmSolver::new(QpSettings::with_tol(tol, max_iter)).solve(problem, None)
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

/// Per-solve ADMM workspace. One instance per concurrent solve.
#[derive(Debug, Clone)]
pub struct AdmmSolver {
    settings: QpSettings,
}

struct Iterate {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

impl AdmmSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    /// Solve `problem`, optionally warm-started from a previous solution.
    pub fn solve(&self, problem: &QpProblem, warm: Option<&QpSolution>) -> QpSolution {
        let s = &self.settings;
        let m = problem.num_vars();
        let (c, lo, hi) = problem.stacked();
        let rows = c.nrows();
        let ct = c.transpose();
        let q = &problem.grad;
        let p = &problem.hess;

        let mut rho_base = s.rho;
        let rho_vec = |base: f64| -> DVector<f64> {
            DVector::from_iterator(
                rows,
                lo.iter().zip(hi.iter()).map(|(l, h)| {
                    if l.is_infinite() && h.is_infinite() {
                        RHO_MIN
                    } else if l == h {
                        RHO_EQ_SCALE * base
                    } else {
                        base
                    }
                }),
            )
        };
        let mut rho = rho_vec(rho_base);
        let mut factor = match factor_kkt(p, &c, &rho, s.sigma) {
            Some(f) => f,
            None => return self.failure(problem, DVector::zeros(m), DVector::zeros(rows), 0, QpStatus::MaxIterations),
        };

        let mut it = match warm {
            Some(w) if w.point.len() == m => {
                let y = if w.dual.len() == rows { w.dual.clone() } else { DVector::zeros(rows) };
                let z = project(&(&c * &w.point), &lo, &hi);
                Iterate { x: w.point.clone(), z, y }
            }
            _ => Iterate { x: DVector::zeros(m), z: project(&DVector::zeros(rows), &lo, &hi), y: DVector::zeros(rows) },
        };

        let q_norm = inf_norm(q);
        let polish_gate = 1e-3 * q_norm.max(1.0);
        let mut last_polish_set: Option<Vec<i8>> = None;
        let mut x_tilde = DVector::zeros(m);

        for k in 1..=s.max_iter {
            let rhs = s.sigma * &it.x - q + &ct * (rho.component_mul(&it.z) - &it.y);
            x_tilde.copy_from(&rhs);
            factor.solve_mut(&mut x_tilde);
            let z_tilde = &c * &x_tilde;

            let x_new = s.alpha * &x_tilde + (1.0 - s.alpha) * &it.x;
            let z_relax = s.alpha * &z_tilde + (1.0 - s.alpha) * &it.z;
            let z_new = project(&(&z_relax + it.y.component_div(&rho)), &lo, &hi);
            let y_new = &it.y + rho.component_mul(&(&z_relax - &z_new));
            let delta_y = &y_new - &it.y;
            it = Iterate { x: x_new, z: z_new, y: y_new };

            let check = k % s.adapt_interval == 0 || k == s.max_iter;
            if !check {
                continue;
            }

            let cx = &c * &it.x;
            let px = p * &it.x;
            let cty = &ct * &it.y;
            let r_prim = inf_norm(&(&cx - &it.z));
            let r_dual = inf_norm(&(&px + q + &cty));

            if r_prim <= s.tol && r_dual <= s.tol {
                return self.finish(problem, &c, it.x, it.y, k, QpStatus::Optimal);
            }

            if primal_infeasible(&ct, &delta_y, &lo, &hi, s.infeasibility_tol) {
                return self.failure(problem, it.x, it.y, k, QpStatus::Infeasible);
            }

            if s.polish && r_prim.max(r_dual) <= polish_gate {
                let set = active_set(&it.z, &it.y, &lo, &hi, &rho);
                if last_polish_set.as_ref() != Some(&set) {
                    if let Some((x, y)) = polish(p, q, &c, &lo, &hi, &set, s.tol) {
                        return self.finish(problem, &c, x, y, k, QpStatus::Optimal);
                    }
                    last_polish_set = Some(set);
                }
            }

            // Penalty rescaling.
            let prim_scale = inf_norm(&cx).max(inf_norm(&it.z)).max(1e-12);
            let dual_scale = inf_norm(&px).max(inf_norm(&cty)).max(q_norm).max(1e-12);
            let ratio = ((r_prim / prim_scale) / (r_dual / dual_scale).max(1e-30)).sqrt();
            let proposed = (rho_base * ratio).clamp(RHO_MIN, RHO_MAX);
            if proposed.is_finite() && (proposed > 5.0 * rho_base || proposed < rho_base / 5.0) {
                let new_rho = rho_vec(proposed);
                if let Some(f) = factor_kkt(p, &c, &new_rho, s.sigma) {
                    rho_base = proposed;
                    rho = new_rho;
                    factor = f;
                }
            }
        }

        // Out of iterations: a last polish attempt before giving up.
        if s.polish {
            let set = active_set(&it.z, &it.y, &lo, &hi, &rho);
            if let Some((x, y)) = polish(p, q, &c, &lo, &hi, &set, s.tol) {
                return self.finish(problem, &c, x, y, s.max_iter, QpStatus::Optimal);
            }
        }
        self.finish(problem, &c, it.x, it.y, s.max_iter, QpStatus::MaxIterations)
    }

    fn finish(
        &self,
        problem: &QpProblem,
        c: &DMatrix<f64>,
        x: DVector<f64>,
        y: DVector<f64>,
        iterations: usize,
        status: QpStatus,
    ) -> QpSolution {
        let dual_residual = inf_norm(&(&problem.hess * &x + &problem.grad + c.transpose() * &y));
        let primal_residual = problem.infeasibility(&x);
        QpSolution { objective: problem.objective(&x), point: x, status, primal_residual, dual_residual, iterations, dual: y }
    }

    fn failure(&self, problem: &QpProblem, x: DVector<f64>, y: DVector<f64>, iterations: usize, status: QpStatus) -> QpSolution {
        let c = problem.stacked().0;
        self.finish(problem, &c, x, y, iterations, status)
    }
}

fn project(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    v.zip_zip_map(lo, hi, |x, l, h| x.max(l).min(h))
}

fn factor_kkt(
    p: &DMatrix<f64>,
    c: &DMatrix<f64>,
    rho: &DVector<f64>,
    sigma: f64,
) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut scaled = c.clone();
    for (i, r) in rho.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*r);
    }
    let mut k = p + c.transpose() * scaled;
    for i in 0..k.nrows() {
        k[(i, i)] += sigma;
    }
    k.cholesky()
}

/// Certificate test on the dual increment: `Cᵀδy ≈ 0` while the support
/// function of the bounds is negative along `δy`.
fn primal_infeasible(ct: &DMatrix<f64>, dy: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, eps: f64) -> bool {
    let dy_norm = inf_norm(dy);
    if dy_norm <= 1e-12 {
        return false;
    }
    if inf_norm(&(ct * dy)) > eps * dy_norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let d = dy[i];
        if d > 0.0 {
            if hi[i].is_infinite() {
                if d > eps * dy_norm {
                    return false;
                }
                continue;
            }
            support += hi[i] * d;
        } else if d < 0.0 {
            if lo[i].is_infinite() {
                if -d > eps * dy_norm {
                    return false;
                }
                continue;
            }
            support += lo[i] * d;
        }
    }
    support < -eps * dy_norm
}

/// `-1` lower-active, `+1` upper-active, `0` inactive, for each stacked row.
fn active_set(z: &DVector<f64>, y: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, rho: &DVector<f64>) -> Vec<i8> {
    (0..z.len())
        .map(|i| {
            let scaled = y[i] / rho[i];
            if lo[i] == hi[i] {
                if y[i] >= 0.0 { 1 } else { -1 }
            } else if z[i] - lo[i] < -scaled {
                -1
            } else if hi[i] - z[i] < scaled {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Solve the equality-constrained QP on the guessed active set and accept it
/// only if it satisfies the full KKT conditions to `tol`.
fn polish(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    c: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    set: &[i8],
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    const DELTA: f64 = 1e-9;
    let m = p.nrows();
    let active: Vec<usize> = (0..set.len()).filter(|&i| set[i] != 0).collect();
    let na = active.len();
    let dim = m + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (m, m)).copy_from(p);
    for (r, &i) in active.iter().enumerate() {
        for j in 0..m {
            kkt[(m + r, j)] = c[(i, j)];
            kkt[(j, m + r)] = c[(i, j)];
        }
        rhs[m + r] = if set[i] < 0 { lo[i] } else { hi[i] };
    }
    for j in 0..m {
        rhs[j] = -q[j];
    }
    let mut reg = kkt.clone();
    for j in 0..m {
        reg[(j, j)] += DELTA;
    }
    for r in 0..na {
        reg[(m + r, m + r)] -= DELTA;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let resid = &rhs - &kkt * &sol;
        if inf_norm(&resid) <= 1e-14 * (1.0 + inf_norm(&rhs)) {
            break;
        }
        sol += lu.solve(&resid)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, m).into_owned();
    let mut y = DVector::zeros(set.len());
    for (r, &i) in active.iter().enumerate() {
        y[i] = sol[m + r];
    }

    // KKT check: feasibility, stationarity and multiplier signs.
    let cx = c * &x;
    let viol = (0..cx.len())
        .map(|i| (lo[i] - cx[i]).max(cx[i] - hi[i]).max(0.0))
        .fold(0.0, f64::max);
    let stationarity = inf_norm(&(p * &x + q + c.transpose() * &y));
    let signs_ok = active.iter().all(|&i| lo[i] == hi[i] || (set[i] > 0 && y[i] >= -tol) || (set[i] < 0 && y[i] <= tol));
    (viol <= tol && stationarity <= tol && signs_ok).then_some((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn interior_minimum() {
        let prob = QpProblem::boxed(DMatrix::identity(2, 2), DVector::zeros(2), v(&[-1.0, -1.0]), v(&[1.0, 1.0])).unwrap();
        let sol = solve_qp(&prob, 1e-6, 20_000);
        assert!(sol.is_optimal());
        assert!(inf_norm(&sol.point) < 1e-6);
        assert!(sol.objective.abs() < 1e-10);
    }

    #[test]
    fn active_upper_bound() {
        let prob = QpProblem::boxed(
            DMatrix::identity(1, 1),
            v(&[-4.0]),
            v(&[f64::NEG_INFINITY]),
            v(&[1.0]),
        )
        .unwrap();
        let sol = solve_qp(&prob, 1e-6, 20_000);
        assert!(sol.is_optimal());
        assert!((sol.point[0] - 1.0).abs() < 1e-6);
        assert!((sol.objective + 3.5).abs() < 1e-6);
    }

    #[test]
    fn general_inequality_active() {
        // min ½|u|² - u0 - u1  s.t.  u0 + u1 ≤ 1  →  u = (½, ½).
        let prob = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[-1.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            v(&[1.0]),
            v(&[-10.0, -10.0]),
            v(&[10.0, 10.0]),
        )
        .unwrap();
        let sol = solve_qp(&prob, 1e-8, 20_000);
        assert!(sol.is_optimal());
        assert!((sol.point - v(&[0.5, 0.5])).amax() < 1e-7);
        assert!(sol.primal_residual <= 1e-8 && sol.dual_residual <= 1e-8);
    }

    #[test]
    fn detects_infeasible_constraints() {
        // u ≥ 2 via -u ≤ -2, but u ≤ 1 from the box.
        let prob = QpProblem::new(
            DMatrix::identity(1, 1),
            v(&[0.0]),
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            v(&[-2.0]),
            v(&[-1.0]),
            v(&[1.0]),
        )
        .unwrap();
        let sol = solve_qp(&prob, 1e-6, 20_000);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn psd_singular_hessian() {
        // Linear objective on a box: minimum at a vertex.
        let prob = QpProblem::boxed(DMatrix::zeros(2, 2), v(&[1.0, -2.0]), v(&[-1.0, -1.0]), v(&[1.0, 3.0])).unwrap();
        let sol = solve_qp(&prob, 1e-6, 20_000);
        assert!(sol.is_optimal());
        assert!((sol.point - v(&[-1.0, 3.0])).amax() < 1e-5);
    }

    #[test]
    fn equal_bounds_fix_the_variable() {
        let prob = QpProblem::boxed(DMatrix::identity(2, 2), v(&[-3.0, 1.0]), v(&[0.25, -5.0]), v(&[0.25, 5.0])).unwrap();
        let sol = solve_qp(&prob, 1e-7, 20_000);
        assert!(sol.is_optimal());
        assert!((sol.point - v(&[0.25, -1.0])).amax() < 1e-6);
    }

    #[test]
    fn problem_validation() {
        let h = DMatrix::identity(2, 2);
        assert!(QpProblem::boxed(h.clone(), v(&[0.0]), v(&[0.0, 0.0]), v(&[1.0, 1.0])).is_err());
        assert!(QpProblem::boxed(h.clone(), v(&[0.0, 0.0]), v(&[2.0, 0.0]), v(&[1.0, 1.0])).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(QpProblem::boxed(asym, v(&[0.0, 0.0]), v(&[0.0, 0.0]), v(&[1.0, 1.0])).is_err());
    }
}
