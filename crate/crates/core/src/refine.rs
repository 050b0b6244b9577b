//! Joint refinement of a depth map and camera intrinsics by gradient descent
//! on the combined loss. No network: the depth grid and the four intrinsic
//! parameters are the free variables.

use serde::Serialize;

use crate::camera::{unproject_depth_map, DepthMap, Intrinsics};
use crate::error::{Error, Result};
use crate::incidence::{field_from_intrinsics, CanonicalCamera, IncidenceField};
use crate::losses::{silog_loss, total_loss_composed, LossWeights};
use crate::metrics::{depth_metrics, shape_metrics, DepthMetrics, ShapeMetrics, DEFAULT_F1_THRESHOLDS};
use crate::solver::DistanceConstraint;

/// Optimization variables: per-pixel log depth and `[ln fx, ln fy, cx, cy]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineState {
    pub width: usize,
    pub height: usize,
    pub log_depth: Vec<f64>,
    pub theta: [f64; 4],
    pub step: usize,
}

impl RefineState {
    pub fn new(width: usize, height: usize, log_depth: Vec<f64>, theta: [f64; 4]) -> Result<Self> {
        if log_depth.len() != width * height {
            return Err(Error::shape(width * height, log_depth.len()));
        }
        if let Some(v) = log_depth.iter().find(|v| !v.exp().is_finite() || v.exp() <= 0.0) {
            return Err(Error::InvalidInitialization(format!("log depth {v} is not usable")));
        }
        let s = Self {
            width,
            height,
            log_depth,
            theta,
            step: 0,
        };
        s.intrinsics()?;
        Ok(s)
    }

    /// Start from a depth map and a camera. Invalid pixels get log depth 0.
    pub fn from_depth(depth: &DepthMap, k: &Intrinsics) -> Result<Self> {
        depth.check_dims(k.width(), k.height())?;
        let log_depth = depth
            .values()
            .iter()
            .zip(depth.valid())
            .map(|(&d, &ok)| if ok { d.ln() } else { 0.0 })
            .collect();
        Self::new(
            k.width(),
            k.height(),
            log_depth,
            [k.fx().ln(), k.fy().ln(), k.cx(), k.cy()],
        )
    }

    /// Start from a depth map and the canonical camera.
    pub fn from_canonical(depth: &DepthMap, cano: &CanonicalCamera) -> Result<Self> {
        Self::from_depth(depth, &cano.to_intrinsics(depth.width(), depth.height())?)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.theta[0].exp(),
            self.theta[1].exp(),
            self.theta[2],
            self.theta[3],
            self.width,
            self.height,
        )
    }

    /// Depth map under the validity mask `valid`.
    pub fn depth(&self, valid: &[bool]) -> Result<DepthMap> {
        DepthMap::new(
            self.width,
            self.height,
            self.log_depth.iter().map(|l| l.exp()).collect(),
            valid.to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Supervision {
    /// Ground-truth depth and incidence field.
    FullGt,
    /// Ground-truth depth plus known distances between pixel pairs; the
    /// incidence target is unused. Constraint pixels must be integer pixels.
    ConstraintsOnly(Vec<DistanceConstraint>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineConfig {
    pub weights: LossWeights,
    pub lr_depth: f64,
    pub lr_theta: f64,
    pub max_steps: usize,
    /// Stop once an accepted step lowers the loss by less than this.
    pub tol: f64,
    pub supervision: Supervision,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr_depth: 1.0,
            lr_theta: 1.0,
            max_steps: 500,
            tol: 1e-12,
            supervision: Supervision::FullGt,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, lr) in [("depth", self.lr_depth), ("theta", self.lr_theta)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} learning rate must be positive, got {lr}"
                )));
            }
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be >= 0, got {}",
                self.tol
            )));
        }
        if let Supervision::ConstraintsOnly(cs) = &self.supervision {
            if cs.is_empty() {
                return Err(Error::InvalidConfig(
                    "constraint supervision needs at least one constraint".into(),
                ));
            }
        }
        Ok(())
    }
}

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_HALVINGS: usize = 30;

struct Eval {
    value: f64,
    /// Gradient with respect to log depth, full grid.
    g_depth: Vec<f64>,
    /// Gradient with respect to `theta`.
    g_theta: [f64; 4],
}

struct Problem<'a> {
    dstar: &'a DepthMap,
    vstar: &'a IncidenceField,
    cfg: &'a RefineConfig,
    /// Grid indices of constraint endpoints in constraint mode.
    endpoints: Vec<(usize, usize)>,
}

impl Problem<'_> {
    fn eval(&self, s: &RefineState) -> Result<Eval> {
        let k = s.intrinsics()?;
        let d = s.depth(self.dstar.valid())?;
        let (value, mut g_depth, g_theta) = match &self.cfg.supervision {
            Supervision::FullGt => {
                let field = field_from_intrinsics(&k);
                let t = total_loss_composed(&d, self.dstar, &field, self.vstar, &self.cfg.weights)?;
                let mut g_theta = [0.0; 4];
                for (g, ray) in t.grad_field.iter().zip(field.rays()) {
                    // ray_x = (u - cx) / fx, so d/d ln fx = -ray_x, d/d cx = -1/fx
                    g_theta[0] -= g[0] * ray[0];
                    g_theta[1] -= g[1] * ray[1];
                    g_theta[2] -= g[0] / k.fx();
                    g_theta[3] -= g[1] / k.fy();
                }
                (t.value, t.grad_depth, g_theta)
            }
            Supervision::ConstraintsOnly(cs) => self.constraint_loss(cs, &d, &k)?,
        };
        for (g, dv) in g_depth.iter_mut().zip(d.values()) {
            *g *= dv;
        }
        Ok(Eval {
            value,
            g_depth,
            g_theta,
        })
    }

    /// `alpha * silog + beta * mean((r_i / L_i^2)^2)` with `r_i` the
    /// calibration residual of constraint `i` at the current depths and
    /// intrinsics.
    fn constraint_loss(
        &self,
        cs: &[DistanceConstraint],
        d: &DepthMap,
        k: &Intrinsics,
    ) -> Result<(f64, Vec<f64>, [f64; 4])> {
        let w = &self.cfg.weights;
        let mut value = 0.0;
        let mut g_depth = vec![0.0; d.len()];
        if w.alpha > 0.0 {
            let s = silog_loss(d, self.dstar, w.lambda)?;
            value += w.alpha * s.value;
            for (g, sg) in g_depth.iter_mut().zip(&s.grad) {
                *g += w.alpha * sg;
            }
        }
        let mut g_theta = [0.0; 4];
        if w.beta > 0.0 {
            let (rx, ry) = (1.0 / k.fx(), 1.0 / k.fy());
            let (tx, ty) = (k.cx() * rx, k.cy() * ry);
            let n = cs.len() as f64;
            for (c, &(i1, i2)) in cs.iter().zip(&self.endpoints) {
                let (d1, d2) = (d.values()[i1], d.values()[i2]);
                let ([u1, v1], [u2, v2]) = (c.p1(), c.p2());
                let l2 = c.length() * c.length();
                let x = d1 * (u1 * rx - tx) - d2 * (u2 * rx - tx);
                let y = d1 * (v1 * ry - ty) - d2 * (v2 * ry - ty);
                let r = (x * x + y * y + (d1 - d2).powi(2) - l2) / l2;
                value += w.beta * r * r / n;
                let coef = w.beta * 2.0 * r / (n * l2);
                // dx/drx and dx/dtx, then the chain to (ln fx, cx)
                let dx_drx = d1 * u1 - d2 * u2;
                let dx_dtx = d2 - d1;
                let dy_dry = d1 * v1 - d2 * v2;
                let dy_dty = d2 - d1;
                let gx = 2.0 * x;
                let gy = 2.0 * y;
                g_theta[0] += coef * gx * (-dx_drx * rx - dx_dtx * tx);
                g_theta[1] += coef * gy * (-dy_dry * ry - dy_dty * ty);
                g_theta[2] += coef * gx * dx_dtx * rx;
                g_theta[3] += coef * gy * dy_dty * ry;
                g_depth[i1] += coef * (gx * (u1 * rx - tx) + gy * (v1 * ry - ty) + 2.0 * (d1 - d2));
                g_depth[i2] += coef * (-gx * (u2 * rx - tx) - gy * (v2 * ry - ty) - 2.0 * (d1 - d2));
            }
        }
        Ok((value, g_depth, g_theta))
    }
}

/// Gradient descent with Armijo backtracking, alternating between the
/// intrinsics block and the depth block so that each keeps its own step size
/// (their curvatures differ by orders of magnitude). Depth steps are scaled by
/// the number of valid pixels (per-pixel gradients of mean losses are
/// `O(1/n)`), principal-point steps by `f^2` (a pixel of `c` moves rays by
/// `1/f`). Only loss-decreasing moves are accepted, so the returned trace
/// (initial loss first, then one entry per step) never increases.
pub fn refine_joint(
    init: RefineState,
    dstar: &DepthMap,
    vstar: &IncidenceField,
    cano: &CanonicalCamera,
    cfg: &RefineConfig,
) -> Result<(RefineState, Vec<f64>)> {
    cfg.validate()?;
    dstar.check_dims(init.width, init.height)?;
    vstar.check_same_dims(init.width, init.height)?;
    cano.to_intrinsics(init.width, init.height)?;
    let endpoints = match &cfg.supervision {
        Supervision::FullGt => Vec::new(),
        Supervision::ConstraintsOnly(cs) => constraint_endpoints(cs, dstar)?,
    };
    let problem = Problem {
        dstar,
        vstar,
        cfg,
        endpoints,
    };

    let mut state = init;
    let mut cur = problem.eval(&state)?;
    if !cur.value.is_finite() {
        return Err(Error::InvalidInitialization(format!("initial loss is {}", cur.value)));
    }
    let mut trace = vec![cur.value];
    let n_valid = dstar.valid_count().max(1) as f64;
    // Remembered step sizes for the theta and depth blocks.
    let mut alphas = [1.0f64; 2];

    while state.step < cfg.max_steps {
        let start = cur.value;
        let mut moved = false;
        for block in 0..2 {
            let (dir_depth, dir_theta) = if block == 0 {
                let fx = state.theta[0].exp();
                let fy = state.theta[1].exp();
                let t = [
                    -cfg.lr_theta * cur.g_theta[0],
                    -cfg.lr_theta * cur.g_theta[1],
                    -cfg.lr_theta * fx * fx * cur.g_theta[2],
                    -cfg.lr_theta * fy * fy * cur.g_theta[3],
                ];
                (None, t)
            } else {
                let d: Vec<f64> = cur
                    .g_depth
                    .iter()
                    .zip(dstar.valid())
                    .map(|(g, &ok)| if ok { -cfg.lr_depth * n_valid * g } else { 0.0 })
                    .collect();
                (Some(d), [0.0; 4])
            };
            if let Some((next, e)) = line_search(
                &problem,
                &state,
                &cur,
                dir_depth.as_deref(),
                dir_theta,
                &mut alphas[block],
            ) {
                state = next;
                cur = e;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        state.step += 1;
        trace.push(cur.value);
        if start - cur.value < cfg.tol {
            break;
        }
    }
    Ok((state, trace))
}

/// Armijo backtracking along one block's direction, starting from twice the
/// block's previous step size (capped at 1).
fn line_search(
    problem: &Problem,
    state: &RefineState,
    cur: &Eval,
    dir_depth: Option<&[f64]>,
    dir_theta: [f64; 4],
    alpha: &mut f64,
) -> Option<(RefineState, Eval)> {
    let mut slope: f64 = dir_theta.iter().zip(&cur.g_theta).map(|(s, g)| s * g).sum();
    if let Some(dd) = dir_depth {
        slope += dd.iter().zip(&cur.g_depth).map(|(s, g)| s * g).sum::<f64>();
    }
    // A predicted decrease below the rounding noise of the loss cannot pass
    // the sufficient-decrease test.
    if !(slope < -4.0 * f64::EPSILON * cur.value.abs()) {
        return None;
    }
    let previous = *alpha;
    *alpha = (2.0 * *alpha).min(1.0);
    for _ in 0..MAX_HALVINGS {
        let mut trial = state.clone();
        if let Some(dd) = dir_depth {
            for (l, s) in trial.log_depth.iter_mut().zip(dd) {
                *l += *alpha * s;
            }
        }
        for (t, s) in trial.theta.iter_mut().zip(&dir_theta) {
            *t += *alpha * s;
        }
        if let Ok(e) = problem.eval(&trial) {
            if e.value.is_finite() && e.value <= cur.value + ARMIJO_C * *alpha * slope {
                return Some((trial, e));
            }
        }
        *alpha *= SHRINK;
    }
    *alpha = previous;
    None
}

fn constraint_endpoints(cs: &[DistanceConstraint], dstar: &DepthMap) -> Result<Vec<(usize, usize)>> {
    let index = |p: [f64; 2]| -> Result<usize> {
        let ok = p[0] >= 0.0
            && p[1] >= 0.0
            && p[0].fract() == 0.0
            && p[1].fract() == 0.0
            && (p[0] as usize) < dstar.width()
            && (p[1] as usize) < dstar.height();
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "constraint pixel {p:?} is not an image pixel"
            )));
        }
        let i = dstar.index(p[0] as usize, p[1] as usize);
        if !dstar.valid()[i] {
            return Err(Error::InvalidConfig(format!(
                "constraint pixel {p:?} has no valid depth"
            )));
        }
        Ok(i)
    };
    cs.iter().map(|c| Ok((index(c.p1())?, index(c.p2())?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineSummary {
    pub depth: DepthMetrics,
    pub fov_error_x: f64,
    pub fov_error_y: f64,
    pub shape: ShapeMetrics,
}

/// Depth, FoV and shape errors of a refined state against ground truth. The
/// predicted cloud uses the state's own depth and intrinsics, the reference
/// cloud `D*` and `K*`.
pub fn refine_report(state: &RefineState, dstar: &DepthMap, kstar: &Intrinsics) -> Result<RefineSummary> {
    let k = state.intrinsics()?;
    let d = state.depth(dstar.valid())?;
    let pred = unproject_depth_map(&k, &d)?;
    let gt = unproject_depth_map(kstar, dstar)?;
    Ok(RefineSummary {
        depth: depth_metrics(&d, dstar, f64::INFINITY)?,
        fov_error_x: (k.fov_x() - kstar.fov_x()).abs(),
        fov_error_y: (k.fov_y() - kstar.fov_y()).abs(),
        shape: shape_metrics(&pred, &gt, &DEFAULT_F1_THRESHOLDS)?,
    })
}
