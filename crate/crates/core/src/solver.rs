//! Intrinsics from depth plus known 3D distances.
//!
//! A pixel pair `(p1, p2)` with depths `d1, d2` and known Euclidean separation
//! `L` of the two back-projected points gives, with `t_x = cx/fx`,
//! `t_y = cy/fy`, `r_x = 1/fx`, `r_y = 1/fy`:
//!
//! ```text
//! (a1 r_x + a2 t_x)^2 + (a3 r_y + a4 t_y)^2 + a5 = 0
//! a1 = d1 u1 - d2 u2,  a2 = d2 - d1,
//! a3 = d1 v1 - d2 v2,  a4 = d2 - d1,
//! a5 = (d1 - d2)^2 - L^2
//! ```
//!
//! Four such pairs pin down all four parameters; more pairs are handled as an
//! overdetermined least-squares problem. Both are solved with
//! Levenberg-Marquardt on the residuals divided by `L^2`, which makes the
//! system dimensionless and invariant to a joint rescaling of depths and
//! distances.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::Serialize;

use crate::camera::{focal_from_fov, Intrinsics};
use crate::error::{Error, Result};

/// A pixel pair with its depths and the metric distance between the two
/// back-projected points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceConstraint {
    p1: [f64; 2],
    p2: [f64; 2],
    d1: f64,
    d2: f64,
    length: f64,
}

impl DistanceConstraint {
    pub fn new(p1: [f64; 2], p2: [f64; 2], d1: f64, d2: f64, length: f64) -> Result<Self> {
        if p1.iter().chain(&p2).any(|c| !c.is_finite()) {
            return Err(Error::InvalidConstraint("pixel coordinates must be finite".into()));
        }
        if p1 == p2 {
            return Err(Error::InvalidConstraint(format!("pixels coincide at {p1:?}")));
        }
        for d in [d1, d2] {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidConstraint(format!(
                    "depth must be finite and positive, got {d}"
                )));
            }
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidConstraint(format!(
                "distance must be finite and positive, got {length}"
            )));
        }
        // Relative slack only absorbs rounding for purely axial pairs.
        let axial = (d1 - d2).abs();
        if length < axial * (1.0 - 1e-12) {
            return Err(Error::InvalidConstraint(format!(
                "distance {length} is shorter than the depth separation {axial}"
            )));
        }
        Ok(Self { p1, p2, d1, d2, length })
    }

    pub fn p1(&self) -> [f64; 2] {
        self.p1
    }
    pub fn p2(&self) -> [f64; 2] {
        self.p2
    }
    pub fn d1(&self) -> f64 {
        self.d1
    }
    pub fn d2(&self) -> f64 {
        self.d2
    }
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Same pixels with depths and distance multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.p1, self.p2, self.d1 * s, self.d2 * s, self.length * s)
    }

    /// Same constraint with a different distance.
    pub fn with_length(&self, length: f64) -> Result<Self> {
        Self::new(self.p1, self.p2, self.d1, self.d2, length)
    }

    /// Same constraint with different depths.
    pub fn with_depths(&self, d1: f64, d2: f64) -> Result<Self> {
        Self::new(self.p1, self.p2, d1, d2, self.length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstraintCoefficients {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
}

/// Reparameterized intrinsics the residual is polynomial in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverParams {
    pub t_x: f64,
    pub t_y: f64,
    pub r_x: f64,
    pub r_y: f64,
}

impl SolverParams {
    pub fn from_intrinsics(k: &Intrinsics) -> Self {
        Self {
            t_x: k.cx() / k.fx(),
            t_y: k.cy() / k.fy(),
            r_x: 1.0 / k.fx(),
            r_y: 1.0 / k.fy(),
        }
    }

    /// Centered camera with the given horizontal and vertical FoV, both
    /// measured across the larger image side.
    pub fn from_fov(fov_x: f64, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        let extent = width.max(height) as f64;
        let fx = focal_from_fov(fov_x, extent)?;
        let fy = focal_from_fov(fov_y, extent)?;
        let k = Intrinsics::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height)?;
        Ok(Self::from_intrinsics(&k))
    }

    /// Default initialization: the 60 degree canonical camera.
    pub fn canonical(width: usize, height: usize) -> Result<Self> {
        Self::from_fov(60.0, 60.0, width, height)
    }

    pub fn to_intrinsics(&self, width: usize, height: usize) -> Result<Intrinsics> {
        if !(self.r_x > 0.0 && self.r_y > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "r_x and r_y must be positive (r_x={}, r_y={})",
                self.r_x, self.r_y
            )));
        }
        Intrinsics::new(
            1.0 / self.r_x,
            1.0 / self.r_y,
            self.t_x / self.r_x,
            self.t_y / self.r_y,
            width,
            height,
        )
    }

    fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.t_x, self.t_y, self.r_x, self.r_y)
    }

    fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            t_x: v[0],
            t_y: v[1],
            r_x: v[2],
            r_y: v[3],
        }
    }
}

pub fn coefficients_from_constraint(c: &DistanceConstraint) -> ConstraintCoefficients {
    let [u1, v1] = c.p1;
    let [u2, v2] = c.p2;
    let dd = c.d1 - c.d2;
    ConstraintCoefficients {
        a1: c.d1 * u1 - c.d2 * u2,
        a2: c.d2 - c.d1,
        a3: c.d1 * v1 - c.d2 * v2,
        a4: c.d2 - c.d1,
        a5: dd * dd - c.length * c.length,
    }
}

/// Left-hand side of the constraint polynomial; zero iff the constraint holds.
///
/// Evaluated in factored form `(a1 r_x + a2 t_x)^2 + (a3 r_y + a4 t_y)^2 + a5`,
/// which is the same polynomial with less cancellation.
pub fn constraint_residual(coef: &ConstraintCoefficients, p: &SolverParams) -> f64 {
    let ex = coef.a1 * p.r_x + coef.a2 * p.t_x;
    let ey = coef.a3 * p.r_y + coef.a4 * p.t_y;
    ex * ex + ey * ey + coef.a5
}

/// Gradient of [`constraint_residual`] in `(t_x, t_y, r_x, r_y)` order.
pub fn constraint_residual_gradient(coef: &ConstraintCoefficients, p: &SolverParams) -> [f64; 4] {
    let ex = coef.a1 * p.r_x + coef.a2 * p.t_x;
    let ey = coef.a3 * p.r_y + coef.a4 * p.t_y;
    [
        2.0 * ex * coef.a2,
        2.0 * ey * coef.a4,
        2.0 * ex * coef.a1,
        2.0 * ey * coef.a3,
    ]
}

/// Per-constraint residuals divided by `L^2`.
pub fn stacked_residuals(constraints: &[DistanceConstraint], p: &SolverParams) -> Vec<f64> {
    constraints
        .iter()
        .map(|c| constraint_residual(&coefficients_from_constraint(c), p) / (c.length * c.length))
        .collect()
}

/// Jacobian of [`stacked_residuals`], one row per constraint.
pub fn stacked_jacobian(constraints: &[DistanceConstraint], p: &SolverParams) -> Vec<[f64; 4]> {
    constraints
        .iter()
        .map(|c| {
            let s = 1.0 / (c.length * c.length);
            constraint_residual_gradient(&coefficients_from_constraint(c), p).map(|g| g * s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RobustLoss {
    Squared,
    Huber { delta: f64 },
}

impl RobustLoss {
    fn cost(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::Squared => 0.5 * r * r,
            RobustLoss::Huber { delta } => {
                let a = r.abs();
                if a <= delta {
                    0.5 * r * r
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
        }
    }

    fn weight(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::Squared => 1.0,
            RobustLoss::Huber { delta } => {
                let a = r.abs();
                if a <= delta {
                    1.0
                } else {
                    delta / a
                }
            }
        }
    }
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LmConfig {
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_damping: f64,
    pub max_iter: usize,
    /// Converged once the scaled residual norm drops below this.
    pub tol_abs: f64,
    /// Converged once a step is this small relative to the parameter norm.
    pub tol_step: f64,
    /// `sigma_min / sigma_max` of the column-equilibrated Jacobian below which
    /// the result carries a condition warning.
    pub warn_ratio: f64,
    /// Ratio below which the problem is treated as rank deficient.
    pub rank_ratio: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_damping: 1e16,
            max_iter: 200,
            tol_abs: 1e-14,
            tol_step: 1e-12,
            warn_ratio: 1e-8,
            rank_ratio: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub intrinsics: Intrinsics,
    pub params: SolverParams,
    /// Euclidean norm of the `L^2`-scaled residual vector at the solution.
    pub final_residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub condition_warning: bool,
    /// `sigma_min / sigma_max` of the column-equilibrated Jacobian at the
    /// solution.
    pub singular_value_ratio: f64,
    /// Other exact solutions found from alternative starting points (minimal
    /// problems only). A non-empty list also sets `condition_warning`.
    pub alternatives: Vec<Intrinsics>,
}

/// Solves the 4-constraint minimal problem.
///
/// Minimal systems of this form can have up to four exact roots. The primary
/// answer is the Levenberg-Marquardt solution from `init`, or the exact root
/// nearest `init` when that run stalls short of zero residual. All other roots
/// (see [`minimal_roots`]) are listed in [`SolveReport::alternatives`]; any
/// alternative, or a result that is not an exact root, sets
/// `condition_warning`.
pub fn solve_minimal(
    constraints: &[DistanceConstraint],
    init: SolverParams,
    width: usize,
    height: usize,
    cfg: &LmConfig,
) -> Result<SolveReport> {
    if constraints.len() != 4 {
        return Err(Error::InvalidConstraint(format!(
            "minimal solver takes exactly 4 constraints, got {}",
            constraints.len()
        )));
    }
    let mut report = solve(constraints, init, RobustLoss::Squared, width, height, cfg)?;
    let roots = minimal_roots(constraints, width, height, cfg);
    let is_exact = |r: &SolveReport| r.converged && r.final_residual_norm < EXACT_ROOT_NORM;
    if !is_exact(&report) {
        // Stuck in a local minimum: restart from the exact root nearest `init`.
        let scale = width.max(height) as f64;
        let dist = |k: &Intrinsics| {
            let p = SolverParams::from_intrinsics(k);
            ((p.r_x - init.r_x) * scale).powi(2)
                + ((p.r_y - init.r_y) * scale).powi(2)
                + (p.t_x - init.t_x).powi(2)
                + (p.t_y - init.t_y).powi(2)
        };
        if let Some(k) = roots.iter().min_by(|a, b| dist(a).total_cmp(&dist(b))) {
            let iterations = report.iterations;
            report = solve(
                constraints,
                SolverParams::from_intrinsics(k),
                RobustLoss::Squared,
                width,
                height,
                cfg,
            )?;
            report.iterations += iterations;
        }
    }
    report.alternatives = roots
        .into_iter()
        .filter(|k| !same_camera(k, &report.intrinsics))
        .collect();
    if !report.alternatives.is_empty() || !is_exact(&report) {
        report.condition_warning = true;
    }
    Ok(report)
}

/// Least-squares solve over `N >= 4` constraints with an optional robust loss.
pub fn solve_overdetermined(
    constraints: &[DistanceConstraint],
    init: SolverParams,
    loss: RobustLoss,
    width: usize,
    height: usize,
    cfg: &LmConfig,
) -> Result<SolveReport> {
    if constraints.len() < 4 {
        return Err(Error::InvalidConstraint(format!(
            "need at least 4 constraints, got {}",
            constraints.len()
        )));
    }
    if let RobustLoss::Huber { delta } = loss {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Huber threshold must be positive, got {delta}"
            )));
        }
    }
    solve(constraints, init, loss, width, height, cfg)
}

/// Huber threshold from residuals: `1.345 * sigma`, with `sigma` the
/// MAD-based scale estimate `1.4826 * median(|r - median(r)|)`.
pub fn huber_delta(residuals: &[f64]) -> f64 {
    let med = median(residuals.to_vec());
    let mad = median(residuals.iter().map(|r| (r - med).abs()).collect());
    (1.345 * 1.4826 * mad).max(f64::MIN_POSITIVE.sqrt())
}

/// Two-stage robust solve: plain least squares, then Huber with a threshold
/// estimated from the first stage's residuals, warm-started.
pub fn solve_robust(
    constraints: &[DistanceConstraint],
    init: SolverParams,
    width: usize,
    height: usize,
    cfg: &LmConfig,
) -> Result<SolveReport> {
    let first = solve_overdetermined(constraints, init, RobustLoss::Squared, width, height, cfg)?;
    let residuals = stacked_residuals(constraints, &first.params);
    let delta = huber_delta(&residuals);
    let mut second = solve_overdetermined(
        constraints,
        first.params,
        RobustLoss::Huber { delta },
        width,
        height,
        cfg,
    )?;
    second.iterations += first.iterations;
    Ok(second)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const EXACT_ROOT_NORM: f64 = 1e-10;

/// Focal lengths beyond this multiple of the image extent (FoV under about
/// 6e-5 degrees) mark a diverged solve.
const RUNAWAY_FOCAL_RATIO: f64 = 1e6;

struct LmOutcome {
    params: Vector4<f64>,
    residual_norm: f64,
    iterations: usize,
    converged: bool,
}

fn residuals_and_jacobian(constraints: &[DistanceConstraint], theta: &Vector4<f64>) -> (Vec<f64>, Vec<[f64; 4]>) {
    let p = SolverParams::from_vector(theta);
    (stacked_residuals(constraints, &p), stacked_jacobian(constraints, &p))
}

fn total_cost(loss: RobustLoss, r: &[f64]) -> f64 {
    r.iter().map(|&ri| loss.cost(ri)).sum()
}

fn norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn run_lm(constraints: &[DistanceConstraint], init: Vector4<f64>, loss: RobustLoss, cfg: &LmConfig) -> LmOutcome {
    let mut out = run_damped(constraints, init, loss, cfg);
    if out.converged {
        polish(constraints, &mut out, loss);
    }
    out
}

/// Gradient and exact Hessian of the weighted cost at `theta`. Each residual
/// is quadratic in the parameters, so its Hessian is a constant outer
/// product per axis.
fn newton_system(
    constraints: &[DistanceConstraint],
    theta: &Vector4<f64>,
    loss: RobustLoss,
) -> (Vec<f64>, Matrix4<f64>, Vector4<f64>) {
    let (r, jac) = residuals_and_jacobian(constraints, theta);
    let mut h = Matrix4::<f64>::zeros();
    let mut g = Vector4::<f64>::zeros();
    for ((ri, row), c) in r.iter().zip(&jac).zip(constraints) {
        let w = loss.weight(*ri);
        let j = Vector4::from(*row);
        h += w * j * j.transpose();
        g += w * *ri * j;
        let a = coefficients_from_constraint(c);
        let s = 2.0 * w * ri / (c.length * c.length);
        // (t_x, t_y, r_x, r_y) ordering
        let x = Vector4::new(a.a2, 0.0, a.a1, 0.0);
        let y = Vector4::new(0.0, a.a4, 0.0, a.a3);
        h += s * (x * x.transpose() + y * y.transpose());
    }
    (r, h, g)
}

/// Newton steps after convergence, accepted while the gradient shrinks.
/// Cost comparisons lose resolution near a minimum (the cost is flat to
/// rounding within about sqrt(eps) of it), and Gauss-Newton converges only
/// linearly when residuals are large; Newton on the gradient has neither
/// problem.
fn polish(constraints: &[DistanceConstraint], out: &mut LmOutcome, loss: RobustLoss) {
    let (_, mut h, mut g) = newton_system(constraints, &out.params, loss);
    for _ in 0..20 {
        let Some(step) = h.lu().solve(&(-g)) else { return };
        let candidate = out.params + step;
        if !(candidate.iter().all(|x| x.is_finite()) && candidate[2] > 0.0 && candidate[3] > 0.0) {
            return;
        }
        let (r_new, h_new, g_new) = newton_system(constraints, &candidate, loss);
        if !(g_new.norm() < g.norm()) {
            return;
        }
        out.params = candidate;
        out.residual_norm = norm(&r_new);
        (h, g) = (h_new, g_new);
    }
}

fn run_damped(constraints: &[DistanceConstraint], init: Vector4<f64>, loss: RobustLoss, cfg: &LmConfig) -> LmOutcome {
    let mut theta = init;
    let (mut r, mut jac) = residuals_and_jacobian(constraints, &theta);
    let mut cost = total_cost(loss, &r);
    let mut mu = cfg.initial_damping;
    let mut iterations = 0;

    if norm(&r) < cfg.tol_abs {
        return LmOutcome {
            params: theta,
            residual_norm: norm(&r),
            iterations,
            converged: true,
        };
    }

    while iterations < cfg.max_iter {
        iterations += 1;
        let mut a = Matrix4::<f64>::zeros();
        let mut g = Vector4::<f64>::zeros();
        for (ri, row) in r.iter().zip(&jac) {
            let w = loss.weight(*ri);
            let j = Vector4::from(*row);
            a += w * j * j.transpose();
            g += w * *ri * j;
        }
        let diag_floor = a.diagonal().max() * 1e-30;

        loop {
            let mut damped = a;
            for i in 0..4 {
                damped[(i, i)] += mu * a[(i, i)].max(diag_floor);
            }
            let step = match damped.lu().solve(&(-g)) {
                Some(s) if s.iter().all(|x| x.is_finite()) => s,
                _ => {
                    mu *= cfg.damping_increase;
                    if mu > cfg.max_damping {
                        return LmOutcome {
                            params: theta,
                            residual_norm: norm(&r),
                            iterations,
                            converged: false,
                        };
                    }
                    continue;
                }
            };
            let small_step = step.norm() <= cfg.tol_step * (theta.norm() + cfg.tol_step);
            let candidate = theta + step;
            let feasible = candidate[2] > 0.0 && candidate[3] > 0.0;
            if feasible {
                let (r_new, jac_new) = residuals_and_jacobian(constraints, &candidate);
                let cost_new = total_cost(loss, &r_new);
                if cost_new < cost {
                    theta = candidate;
                    r = r_new;
                    jac = jac_new;
                    cost = cost_new;
                    mu = (mu / cfg.damping_decrease).max(1e-300);
                    let rn = norm(&r);
                    if rn < cfg.tol_abs || small_step {
                        return LmOutcome {
                            params: theta,
                            residual_norm: rn,
                            iterations,
                            converged: true,
                        };
                    }
                    break;
                }
            }
            if small_step && feasible {
                // No descent left at the working precision.
                return LmOutcome {
                    params: theta,
                    residual_norm: norm(&r),
                    iterations,
                    converged: true,
                };
            }
            mu *= cfg.damping_increase;
            if mu > cfg.max_damping {
                return LmOutcome {
                    params: theta,
                    residual_norm: norm(&r),
                    iterations,
                    converged: false,
                };
            }
        }
    }
    LmOutcome {
        params: theta,
        residual_norm: norm(&r),
        iterations,
        converged: false,
    }
}

/// `sigma_min / sigma_max` of the Jacobian after scaling every column to unit
/// norm; 0 when a column vanishes.
fn equilibrated_singular_ratio(jac: &[[f64; 4]]) -> f64 {
    let mut col_norms = [0.0f64; 4];
    for row in jac {
        for (n, v) in col_norms.iter_mut().zip(row) {
            *n += v * v;
        }
    }
    let col_norms = col_norms.map(f64::sqrt);
    if col_norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
        return 0.0;
    }
    let m = DMatrix::from_fn(jac.len(), 4, |i, j| jac[i][j] / col_norms[j]);
    let sv = m.singular_values();
    let max = sv.max();
    let min = if jac.len() < 4 { 0.0 } else { sv.min() };
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

fn structural_degeneracy(constraints: &[DistanceConstraint]) -> Option<String> {
    let coefs: Vec<_> = constraints.iter().map(coefficients_from_constraint).collect();
    if coefs.iter().all(|c| c.a2 == 0.0 && c.a4 == 0.0) {
        return Some("every pair has equal depths, so the principal point is unobservable".into());
    }
    if coefs.iter().all(|c| c.a1 == 0.0 && c.a2 == 0.0) {
        return Some("no pair constrains the horizontal axis".into());
    }
    if coefs.iter().all(|c| c.a3 == 0.0 && c.a4 == 0.0) {
        return Some("no pair constrains the vertical axis".into());
    }
    None
}

fn solve(
    constraints: &[DistanceConstraint],
    init: SolverParams,
    loss: RobustLoss,
    width: usize,
    height: usize,
    cfg: &LmConfig,
) -> Result<SolveReport> {
    if !(init.r_x > 0.0 && init.r_y > 0.0) || !init.t_x.is_finite() || !init.t_y.is_finite() {
        return Err(Error::InvalidInitialization(format!(
            "initial parameters must be finite with r_x, r_y > 0: {init:?}"
        )));
    }
    if let Some(why) = structural_degeneracy(constraints) {
        return Err(Error::DegenerateConstraints(why));
    }
    let theta0 = init.to_vector();
    let (_, jac0) = residuals_and_jacobian(constraints, &theta0);
    let ratio0 = equilibrated_singular_ratio(&jac0);
    if ratio0 < cfg.rank_ratio {
        return Err(Error::DegenerateConstraints(format!(
            "Jacobian is rank deficient at the initial point (sigma ratio {ratio0:.3e})"
        )));
    }

    let out = run_lm(constraints, theta0, loss, cfg);
    let (_, jac) = residuals_and_jacobian(constraints, &out.params);
    let ratio = equilibrated_singular_ratio(&jac);
    if ratio < cfg.rank_ratio {
        return Err(Error::DegenerateConstraints(format!(
            "Jacobian is rank deficient at the solution (sigma ratio {ratio:.3e})"
        )));
    }
    let params = SolverParams::from_vector(&out.params);
    let intrinsics = params.to_intrinsics(width, height)?;
    // A focal length running off to infinity switches that axis off entirely;
    // LM can settle there, but it is not a camera.
    let runaway = intrinsics.fx().max(intrinsics.fy()) > RUNAWAY_FOCAL_RATIO * width.max(height) as f64;
    Ok(SolveReport {
        intrinsics,
        params,
        final_residual_norm: out.residual_norm,
        iterations: out.iterations,
        converged: out.converged && out.residual_norm.is_finite() && !runaway,
        condition_warning: ratio < cfg.warn_ratio || runaway,
        singular_value_ratio: ratio,
        alternatives: Vec::new(),
    })
}

/// Every exact solution of a 4-constraint system with positive focal lengths,
/// each polished by Levenberg-Marquardt.
///
/// Writing `z = (r_x, t_x)` and `w = (r_y, t_y)`, each constraint is linear in
/// the entries of the rank-one matrices `z z^T` and `w w^T`. Four constraints
/// leave a two-parameter affine family of symmetric pairs, and the two rank-one
/// conditions are conics in those parameters. Their intersections (at most
/// four) are the roots of a quartic resultant.
pub fn minimal_roots(
    constraints: &[DistanceConstraint],
    width: usize,
    height: usize,
    cfg: &LmConfig,
) -> Vec<Intrinsics> {
    let mut found: Vec<Intrinsics> = Vec::new();
    for theta in root_candidates(constraints, width.max(height) as f64) {
        let out = run_lm(constraints, theta, RobustLoss::Squared, cfg);
        if !out.residual_norm.is_finite() || out.residual_norm >= EXACT_ROOT_NORM {
            continue;
        }
        let Ok(k) = SolverParams::from_vector(&out.params).to_intrinsics(width, height) else {
            continue;
        };
        if !found.iter().any(|f| same_camera(f, &k)) {
            found.push(k);
        }
    }
    found
}

/// Unpolished starting points, one near each algebraic root.
fn root_candidates(constraints: &[DistanceConstraint], scale: f64) -> Vec<Vector4<f64>> {
    // Unknowns in units where r * scale is O(1):
    // m = (rx'^2, rx' tx, tx^2, ry'^2, ry' ty, ty^2) with rx' = rx * scale.
    let mut m = DMatrix::<f64>::zeros(6, 6);
    let mut rhs = DVector::<f64>::zeros(6);
    for (i, c) in constraints.iter().enumerate().take(4) {
        let a = coefficients_from_constraint(c);
        let l2 = c.length * c.length;
        let (x0, x1) = (a.a1 / scale, a.a2);
        let (y0, y1) = (a.a3 / scale, a.a4);
        let row = [x0 * x0, 2.0 * x0 * x1, x1 * x1, y0 * y0, 2.0 * y0 * y1, y1 * y1];
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = v / l2;
        }
        rhs[i] = -a.a5 / l2;
    }
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Vec::new();
    };
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if !(sv(3) > 1e-12 * sv(0)) {
        return Vec::new();
    }
    let mut p = DVector::<f64>::zeros(6);
    for &k in &order[..4] {
        let coef = u.column(k).dot(&rhs) / svd.singular_values[k];
        p += coef * v_t.row(k).transpose();
    }
    let n1 = v_t.row(order[4]).transpose();
    let n2 = v_t.row(order[5]).transpose();
    let affine = |j: usize| [p[j], n1[j], n2[j]];

    let g1 = rank_one_conic(affine(0), affine(1), affine(2));
    let g2 = rank_one_conic(affine(3), affine(4), affine(5));

    let mut candidates = Vec::new();
    for t in real_roots(&conic_resultant(&g1, &g2)) {
        let mut ss = conic_roots_in_s(&g1, t);
        ss.extend(conic_roots_in_s(&g2, t));
        for s in ss {
            let mv: Vec<f64> = (0..6).map(|j| p[j] + s * n1[j] + t * n2[j]).collect();
            let (Some((rx, tx)), Some((ry, ty))) = (
                rank_one_factor(mv[0], mv[1], mv[2]),
                rank_one_factor(mv[3], mv[4], mv[5]),
            ) else {
                continue;
            };
            candidates.push(Vector4::new(tx, ty, rx / scale, ry / scale));
        }
    }
    candidates
}

/// Conic `q00 q22 - q11^2` for `q_j = c0 + c1 s + c2 t`, as coefficients of
/// `[1, s, t, s^2, s t, t^2]`.
fn rank_one_conic(q0: [f64; 3], q1: [f64; 3], q2: [f64; 3]) -> [f64; 6] {
    let prod = |a: [f64; 3], b: [f64; 3]| {
        [
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[1],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
        ]
    };
    let x = prod(q0, q2);
    let y = prod(q1, q1);
    std::array::from_fn(|k| x[k] - y[k])
}

/// Coefficients of the conic as a quadratic in `s`, each a polynomial in `t`
/// (lowest degree first).
fn in_s(g: &[f64; 6]) -> [Vec<f64>; 3] {
    [vec![g[0], g[2], g[5]], vec![g[1], g[4]], vec![g[3]]]
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    (0..a.len().max(b.len()))
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect()
}

/// Resultant in `s` of two conics, a polynomial of degree <= 4 in `t`.
fn conic_resultant(g1: &[f64; 6], g2: &[f64; 6]) -> Vec<f64> {
    let [c, b, a] = in_s(g1);
    let [c2, b2, a2] = in_s(g2);
    let ac = poly_sub(&poly_mul(&a, &c2), &poly_mul(&a2, &c));
    let ab = poly_sub(&poly_mul(&a, &b2), &poly_mul(&a2, &b));
    let bc = poly_sub(&poly_mul(&b, &c2), &poly_mul(&b2, &c));
    poly_sub(&poly_mul(&ac, &ac), &poly_mul(&ab, &bc))
}

/// Real parts of all roots of a polynomial (lowest degree first) whose
/// imaginary part is small; near-double roots may pick up a little.
fn real_roots(poly: &[f64]) -> Vec<f64> {
    let scale = poly.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return Vec::new();
    }
    let mut coefs: Vec<f64> = poly.iter().map(|c| c / scale).collect();
    while coefs.last().is_some_and(|c| c.abs() < 1e-13) {
        coefs.pop();
    }
    let n = coefs.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let lead = coefs[n];
    let companion = DMatrix::<f64>::from_fn(n, n, |i, j| {
        if i == 0 {
            -coefs[n - 1 - j] / lead
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.re.is_finite() && z.im.abs() <= 1e-3 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

fn conic_roots_in_s(g: &[f64; 6], t: f64) -> Vec<f64> {
    let a = g[3];
    let b = g[1] + g[4] * t;
    let c = g[0] + g[2] * t + g[5] * t * t;
    if a.abs() <= 1e-14 * (b.abs() + c.abs()) {
        return if b != 0.0 { vec![-c / b] } else { Vec::new() };
    }
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    let q = -0.5 * (b + b.signum() * disc);
    let mut out = vec![q / a];
    if q != 0.0 {
        out.push(c / q);
    }
    out
}

/// `(x, y)` with `x > 0` and `[x^2, x y, y^2]` close to `[m00, m01, m11]`.
fn rank_one_factor(m00: f64, m01: f64, m11: f64) -> Option<(f64, f64)> {
    let (x, y) = if m00 >= m11 {
        let x = m00.max(0.0).sqrt();
        (x, m01 / x)
    } else {
        let y = m11.max(0.0).sqrt();
        (m01 / y, y)
    };
    let (x, y) = if x < 0.0 { (-x, -y) } else { (x, y) };
    (x > 0.0 && x.is_finite() && y.is_finite()).then_some((x, y))
}

fn same_camera(a: &Intrinsics, b: &Intrinsics) -> bool {
    let close = |x: f64, y: f64, scale: f64| (x - y).abs() <= 1e-6 * scale;
    close(a.fx(), b.fx(), b.fx())
        && close(a.fy(), b.fy(), b.fy())
        && close(a.cx(), b.cx(), b.fx())
        && close(a.cy(), b.cy(), b.fy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn constraint_from_points(k: &Intrinsics, a: [f64; 3], b: [f64; 3]) -> DistanceConstraint {
        let (u1, v1) = k.project(a);
        let (u2, v2) = k.project(b);
        let l = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        DistanceConstraint::new([u1, v1], [u2, v2], a[2], b[2], l).unwrap()
    }

    #[test]
    fn coefficient_example() {
        let c = DistanceConstraint::new([320.0, 240.0], [420.0, 240.0], 2.0, 2.0, 0.4).unwrap();
        let a = coefficients_from_constraint(&c);
        assert_eq!(a.a1, -200.0);
        assert_eq!(a.a2, 0.0);
        assert_eq!(a.a3, 0.0);
        assert_eq!(a.a4, 0.0);
        assert!((a.a5 + 0.16).abs() < 1e-15);
    }

    #[test]
    fn constraint_validation() {
        assert!(DistanceConstraint::new([1.0, 1.0], [1.0, 1.0], 1.0, 2.0, 1.0).is_err());
        assert!(DistanceConstraint::new([1.0, 1.0], [2.0, 1.0], 0.0, 2.0, 1.0).is_err());
        assert!(DistanceConstraint::new([1.0, 1.0], [2.0, 1.0], 1.0, 2.0, 0.0).is_err());
        assert!(DistanceConstraint::new([1.0, 1.0], [2.0, 1.0], 1.0, 3.0, 1.5).is_err());
        assert!(DistanceConstraint::new([1.0, 1.0], [2.0, 1.0], 1.0, 3.0, 2.0).is_ok());
    }

    #[test]
    fn residual_zero_at_truth() {
        let k = gt();
        let c = constraint_from_points(&k, [0.0, 0.0, 2.0], [0.4, 0.0, 2.5]);
        assert_eq!(c.p1(), [320.0, 240.0]);
        assert_eq!(c.p2(), [400.0, 240.0]);
        assert!((c.length() - 0.41f64.sqrt()).abs() < 1e-15);
        let r = constraint_residual(&coefficients_from_constraint(&c), &SolverParams::from_intrinsics(&k));
        assert!(r.abs() < 1e-12, "{r}");
    }

    #[test]
    fn axial_pair_has_zero_residual() {
        // u1*d1 == u2*d2 and v1*d1 == v2*d2 with the principal point at the
        // origin: both points lie on one ray, so only the z gap remains.
        let k = Intrinsics::new(500.0, 500.0, 0.0, 0.0, 640, 480).unwrap();
        let c = DistanceConstraint::new([100.0, 50.0], [200.0, 100.0], 2.0, 1.0, 1.0).unwrap();
        let a = coefficients_from_constraint(&c);
        assert_eq!((a.a1, a.a3), (0.0, 0.0));
        assert_eq!(constraint_residual(&a, &SolverParams::from_intrinsics(&k)), 0.0);
    }

    #[test]
    fn constant_term_only() {
        let coef = ConstraintCoefficients {
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
            a4: 0.0,
            a5: -0.16,
        };
        let p = SolverParams {
            t_x: 0.3,
            t_y: -2.0,
            r_x: 0.01,
            r_y: 5.0,
        };
        assert_eq!(constraint_residual(&coef, &p), -0.16);
    }

    #[test]
    fn residual_matches_expanded_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = ConstraintCoefficients {
                a1: rng.random_range(-500.0..500.0),
                a2: rng.random_range(-2.0..2.0),
                a3: rng.random_range(-500.0..500.0),
                a4: rng.random_range(-2.0..2.0),
                a5: rng.random_range(-5.0..0.0),
            };
            let p = SolverParams {
                t_x: rng.random_range(0.2..1.0),
                t_y: rng.random_range(0.2..1.0),
                r_x: rng.random_range(1e-3..1e-2),
                r_y: rng.random_range(1e-3..1e-2),
            };
            let expanded = a.a1 * a.a1 * p.r_x * p.r_x
                + 2.0 * a.a1 * a.a2 * p.t_x * p.r_x
                + a.a2 * a.a2 * p.t_x * p.t_x
                + a.a3 * a.a3 * p.r_y * p.r_y
                + 2.0 * a.a3 * a.a4 * p.t_y * p.r_y
                + a.a4 * a.a4 * p.t_y * p.t_y
                + a.a5;
            let r = constraint_residual(&a, &p);
            assert!((r - expanded).abs() <= 1e-12 * (1.0 + expanded.abs()));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = ConstraintCoefficients {
                a1: rng.random_range(-500.0..500.0),
                a2: rng.random_range(-2.0..2.0),
                a3: rng.random_range(-500.0..500.0),
                a4: rng.random_range(-2.0..2.0),
                a5: rng.random_range(-5.0..0.0),
            };
            let p = SolverParams {
                t_x: rng.random_range(0.2..1.0),
                t_y: rng.random_range(0.2..1.0),
                r_x: rng.random_range(1e-3..1e-2),
                r_y: rng.random_range(1e-3..1e-2),
            };
            let g = constraint_residual_gradient(&a, &p);
            let base = [p.t_x, p.t_y, p.r_x, p.r_y];
            for j in 0..4 {
                let h = 1e-5 * base[j].abs();
                let mut plus = base;
                let mut minus = base;
                plus[j] += h;
                minus[j] -= h;
                let at = |v: [f64; 4]| {
                    constraint_residual(
                        &a,
                        &SolverParams {
                            t_x: v[0],
                            t_y: v[1],
                            r_x: v[2],
                            r_y: v[3],
                        },
                    )
                };
                let fd = (at(plus) - at(minus)) / (2.0 * h);
                let scale = g[j].abs().max(1e-8);
                assert!((fd - g[j]).abs() / scale < 1e-6, "j={j} fd={fd} an={}", g[j]);
            }
        }
    }

    fn random_pairs(k: &Intrinsics, n: usize, seed: u64) -> Vec<DistanceConstraint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let u1 = rng.random_range(0.0..k.width() as f64);
            let v1 = rng.random_range(0.0..k.height() as f64);
            let u2 = rng.random_range(0.0..k.width() as f64);
            let v2 = rng.random_range(0.0..k.height() as f64);
            let d1: f64 = rng.random_range(1.0..8.0);
            let d2: f64 = rng.random_range(1.0..8.0);
            if d1.max(d2) / d1.min(d2) < 1.2 {
                continue;
            }
            let a = crate::camera::unproject_pixel(k, u1, v1, d1).unwrap();
            let b = crate::camera::unproject_pixel(k, u2, v2, d2).unwrap();
            let l = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            out.push(DistanceConstraint::new([u1, v1], [u2, v2], d1, d2, l).unwrap());
        }
        out
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn minimal_roots_contain_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..30 {
            let k = Intrinsics::new(
                rng.random_range(200.0..900.0),
                rng.random_range(200.0..900.0),
                rng.random_range(300.0..340.0),
                rng.random_range(220.0..260.0),
                640,
                480,
            )
            .unwrap();
            let cs = random_pairs(&k, 4, 100 + seed);
            let roots = minimal_roots(&cs, 640, 480, &LmConfig::default());
            assert!(!roots.is_empty() && roots.len() <= 4);
            assert!(roots.iter().any(|r| same_camera(r, &k)), "seed {seed}: {roots:?}");
            for r in &roots {
                let res = stacked_residuals(&cs, &SolverParams::from_intrinsics(r));
                assert!(norm(&res) < 1e-9);
            }
        }
    }

    #[test]
    fn quartic_roots() {
        // (t - 1)(t + 2)(t - 3)(t^2 + 1) has three real roots
        let p = poly_mul(
            &poly_mul(&[-1.0, 1.0], &[2.0, 1.0]),
            &poly_mul(&[-3.0, 1.0], &[1.0, 0.0, 1.0]),
        );
        let mut r = real_roots(&p);
        r.sort_by(f64::total_cmp);
        assert_eq!(r.len(), 3);
        for (a, b) in r.iter().zip([-2.0, 1.0, 3.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn minimal_recovers_camera() {
        let k = gt();
        let init = SolverParams::canonical(640, 480).unwrap();
        let mut ok = 0;
        for seed in 0..20 {
            let cs = random_pairs(&k, 4, seed);
            let rep = solve_minimal(&cs, init, 640, 480, &LmConfig::default()).unwrap();
            let good = rel(rep.intrinsics.fx(), 500.0) < 1e-6
                && rel(rep.intrinsics.fy(), 500.0) < 1e-6
                && rel(rep.intrinsics.cx(), 320.0) < 1e-6
                && rel(rep.intrinsics.cy(), 240.0) < 1e-6;
            if good {
                ok += 1;
            } else {
                assert!(rep.condition_warning || !rep.converged, "silently wrong: {rep:?}");
            }
        }
        assert!(ok >= 18, "{ok}/20");
    }

    #[test]
    fn equal_depth_sets_are_degenerate() {
        let k = gt();
        let cs: Vec<_> = (0..4)
            .map(|i| {
                let y = 0.1 * i as f64 - 0.2;
                constraint_from_points(&k, [-0.5, y, 2.0], [0.3 + 0.1 * i as f64, y, 2.0])
            })
            .collect();
        let err = solve_minimal(
            &cs,
            SolverParams::canonical(640, 480).unwrap(),
            640,
            480,
            &LmConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateConstraints(_)));
    }

    #[test]
    fn duplicated_constraints_are_degenerate() {
        let k = gt();
        let mut cs = random_pairs(&k, 3, 9);
        cs.push(cs[0]);
        let err = solve_minimal(
            &cs,
            SolverParams::canonical(640, 480).unwrap(),
            640,
            480,
            &LmConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateConstraints(_)), "{err:?}");
    }

    #[test]
    fn already_solved_returns_init() {
        let k = gt();
        let cs = random_pairs(&k, 4, 2);
        let init = SolverParams::from_intrinsics(&k);
        let rep = solve_minimal(&cs, init, 640, 480, &LmConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 1);
        assert!(rel(rep.intrinsics.fx(), 500.0) < 1e-12);
        assert!(rel(rep.intrinsics.cx(), 320.0) < 1e-12);
    }

    #[test]
    fn overdetermined_exact() {
        let k = Intrinsics::new(610.0, 585.0, 300.0, 250.0, 640, 480).unwrap();
        let cs = random_pairs(&k, 100, 4);
        let rep = solve_overdetermined(
            &cs,
            SolverParams::canonical(640, 480).unwrap(),
            RobustLoss::Squared,
            640,
            480,
            &LmConfig::default(),
        )
        .unwrap();
        assert!(rep.converged);
        assert!(rel(rep.intrinsics.fx(), 610.0) < 1e-6);
        assert!(rel(rep.intrinsics.fy(), 585.0) < 1e-6);
        assert!(rel(rep.intrinsics.cx(), 300.0) < 1e-6);
        assert!(rel(rep.intrinsics.cy(), 250.0) < 1e-6);
    }

    #[test]
    fn huber_beats_squared_with_outlier() {
        let k = gt();
        let mut cs = random_pairs(&k, 100, 21);
        cs[7] = cs[7].with_length(cs[7].length() * 2.0).unwrap();
        let init = SolverParams::canonical(640, 480).unwrap();
        let cfg = LmConfig::default();
        let sq = solve_overdetermined(&cs, init, RobustLoss::Squared, 640, 480, &cfg).unwrap();
        let hub = solve_robust(&cs, init, 640, 480, &cfg).unwrap();
        assert!(rel(hub.intrinsics.fx(), 500.0) < rel(sq.intrinsics.fx(), 500.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = gt();
        let cs = random_pairs(&k, 10, 5);
        let p = SolverParams::from_fov(70.0, 55.0, 640, 480).unwrap();
        let jac = stacked_jacobian(&cs, &p);
        let base = [p.t_x, p.t_y, p.r_x, p.r_y];
        for j in 0..4 {
            let h = 1e-6 * base[j].abs();
            let mut plus = base;
            let mut minus = base;
            plus[j] += h;
            minus[j] -= h;
            let mk = |v: [f64; 4]| SolverParams {
                t_x: v[0],
                t_y: v[1],
                r_x: v[2],
                r_y: v[3],
            };
            let rp = stacked_residuals(&cs, &mk(plus));
            let rm = stacked_residuals(&cs, &mk(minus));
            for i in 0..cs.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                let scale = jac[i][j].abs().max(1e-6);
                assert!((fd - jac[i][j]).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn huber_delta_uses_mad() {
        let r = [0.0, 1.0, -1.0, 2.0, -2.0];
        // median 0, MAD 1
        assert!((huber_delta(&r) - 1.345 * 1.4826).abs() < 1e-12);
    }
}
