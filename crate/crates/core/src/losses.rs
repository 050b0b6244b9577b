//! Depth, ray and point-cloud losses with analytic gradients.
//!
//! * scale-invariant log loss on depth,
//! * `1 - cosine` between composed predicted rays and ground-truth rays,
//! * symmetric Chamfer distance between point clouds,
//!
//! and their weighted sum, whose gradient reaches the depth map through the
//! log loss and the Chamfer term, and the residual incidence field through the
//! cosine and Chamfer terms.

use serde::{Deserialize, Serialize};

use crate::camera::{DepthMap, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::incidence::{compose_residual, unproject_with_field, IncidenceField};
use crate::nn::nearest_neighbors;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 1.0,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.beta, self.gamma];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig("at least one loss weight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A loss value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: G,
}

/// Gradient of the Chamfer distance with respect to both clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct ChamferGrad {
    pub p: Vec<Point3>,
    pub q: Vec<Point3>,
}

/// Scale-invariant log loss over jointly valid pixels:
/// `mean(delta^2) - lambda * mean(delta)^2` with `delta = ln D - ln D*`.
///
/// The gradient is with respect to `D`, laid out on the full grid (zero at
/// pixels that do not enter the loss).
pub fn silog_loss(d: &DepthMap, dstar: &DepthMap, lambda: f64) -> Result<LossValue<Vec<f64>>> {
    d.check_dims(dstar.width(), dstar.height())?;
    let joint: Vec<usize> = (0..d.len()).filter(|&i| d.valid()[i] && dstar.valid()[i]).collect();
    if joint.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let n = joint.len() as f64;
    let deltas: Vec<f64> = joint
        .iter()
        .map(|&i| d.values()[i].ln() - dstar.values()[i].ln())
        .collect();
    let sum: f64 = deltas.iter().sum();
    let sum_sq: f64 = deltas.iter().map(|x| x * x).sum();
    let value = sum_sq / n - lambda * sum * sum / (n * n);

    let mut grad = vec![0.0; d.len()];
    for (&i, &delta) in joint.iter().zip(&deltas) {
        let di = d.values()[i];
        grad[i] = (2.0 / n) * delta / di - (2.0 * lambda / (n * n)) * sum / di;
    }
    Ok(LossValue { value, grad })
}

/// Mean `1 - cos` between already-composed rays and ground-truth rays, with
/// the gradient taken with respect to the composed rays (z component zero).
pub fn cosine_loss_composed(
    composed: &IncidenceField,
    vstar: &IncidenceField,
    include: Option<&[bool]>,
) -> Result<LossValue<Vec<Point3>>> {
    composed.check_same_dims(vstar.width(), vstar.height())?;
    if let Some(m) = include {
        if m.len() != composed.len() {
            return Err(Error::shape(composed.len(), m.len()));
        }
    }
    let used = |i: usize| include.is_none_or(|m| m[i]);
    let n = (0..composed.len()).filter(|&i| used(i)).count();
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; composed.len()];
    for i in (0..composed.len()).filter(|&i| used(i)) {
        let c = composed.rays()[i];
        let s = vstar.rays()[i];
        let nc = norm3(&c);
        let ns = norm3(&s);
        assert!(nc > 0.0 && ns > 0.0, "zero-length incidence ray at pixel {i}");
        let ch = c.map(|x| x / nc);
        let sh = s.map(|x| x / ns);
        let cos = dot3(&ch, &sh);
        value += 1.0 - cos;
        // d(1 - cos)/dc = -(sh - cos * ch) / |c|; z of a composed ray is fixed.
        for k in 0..2 {
            grad[i][k] = -inv_n * (sh[k] - cos * ch[k]) / nc;
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grad,
    })
}

/// Cosine loss of a residual field `v` composed onto `vcano`, against `vstar`.
/// Gradient is with respect to `v` (x and y; z does not enter composition).
/// `include` restricts the average to a subset of pixels.
pub fn cosine_incidence_loss(
    v: &IncidenceField,
    vcano: &IncidenceField,
    vstar: &IncidenceField,
    include: Option<&[bool]>,
) -> Result<LossValue<Vec<Point3>>> {
    let composed = compose_residual(v, vcano)?;
    let inner = cosine_loss_composed(&composed, vstar, include)?;
    Ok(LossValue {
        value: inner.value,
        grad: chain_through_composition(&inner.grad, vcano),
    })
}

fn chain_through_composition(grad_composed: &[Point3], vcano: &IncidenceField) -> Vec<Point3> {
    grad_composed
        .iter()
        .zip(vcano.rays())
        .map(|(g, c)| [g[0] * c[0], g[1] * c[1], 0.0])
        .collect()
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance from
/// `p` to `q` plus the same from `q` to `p`.
pub fn chamfer_distance(p: &PointCloud, q: &PointCloud) -> Result<LossValue<ChamferGrad>> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let p_to_q = nearest_neighbors(&p.points, &q.points);
    let q_to_p = nearest_neighbors(&q.points, &p.points);
    let inv_p = 1.0 / p.len() as f64;
    let inv_q = 1.0 / q.len() as f64;

    let mut gp = vec![[0.0; 3]; p.len()];
    let mut gq = vec![[0.0; 3]; q.len()];
    let mut fwd = 0.0;
    for (i, &(j, d2)) in p_to_q.iter().enumerate() {
        fwd += d2;
        for k in 0..3 {
            let g = 2.0 * inv_p * (p.points[i][k] - q.points[j][k]);
            gp[i][k] += g;
            gq[j][k] -= g;
        }
    }
    let mut bwd = 0.0;
    for (j, &(i, d2)) in q_to_p.iter().enumerate() {
        bwd += d2;
        for k in 0..3 {
            let g = 2.0 * inv_q * (q.points[j][k] - p.points[i][k]);
            gq[j][k] += g;
            gp[i][k] -= g;
        }
    }
    Ok(LossValue {
        value: fwd * inv_p + bwd * inv_q,
        grad: ChamferGrad { p: gp, q: gq },
    })
}

/// Weighted sum of the three losses with its component values.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub silog: f64,
    pub cosine: f64,
    pub chamfer: f64,
    /// Gradient with respect to predicted depth, full grid.
    pub grad_depth: Vec<f64>,
    /// Gradient with respect to the field that was passed in (residual field
    /// for [`total_loss`], composed field for [`total_loss_composed`]).
    pub grad_field: Vec<Point3>,
}

/// Total loss where the predicted field is given directly in composed (z=1
/// ray) form.
pub fn total_loss_composed(
    d: &DepthMap,
    dstar: &DepthMap,
    composed: &IncidenceField,
    vstar: &IncidenceField,
    w: &LossWeights,
) -> Result<TotalLoss> {
    w.validate()?;
    d.check_dims(dstar.width(), dstar.height())?;
    composed.check_same_dims(d.width(), d.height())?;
    vstar.check_same_dims(d.width(), d.height())?;

    let mut grad_depth = vec![0.0; d.len()];
    let mut grad_field = vec![[0.0; 3]; d.len()];

    let mut silog = 0.0;
    if w.alpha > 0.0 {
        let s = silog_loss(d, dstar, w.lambda)?;
        silog = s.value;
        for (g, sg) in grad_depth.iter_mut().zip(&s.grad) {
            *g += w.alpha * sg;
        }
    }

    let mut cosine = 0.0;
    if w.beta > 0.0 {
        let c = cosine_loss_composed(composed, vstar, None)?;
        cosine = c.value;
        for (g, cg) in grad_field.iter_mut().zip(&c.grad) {
            g[0] += w.beta * cg[0];
            g[1] += w.beta * cg[1];
        }
    }

    let mut chamfer = 0.0;
    if w.gamma > 0.0 {
        let pred = unproject_with_field(composed, d)?;
        let gt = unproject_with_field(vstar, dstar)?;
        let cd = chamfer_distance(&pred, &gt)?;
        chamfer = cd.value;
        // Predicted points are d * ray for valid pixels, in row-major order.
        let pixels = (0..d.len()).filter(|&i| d.valid()[i]);
        for (i, gp) in pixels.zip(&cd.grad.p) {
            let ray = composed.rays()[i];
            let depth = d.values()[i];
            grad_depth[i] += w.gamma * (gp[0] * ray[0] + gp[1] * ray[1] + gp[2] * ray[2]);
            grad_field[i][0] += w.gamma * gp[0] * depth;
            grad_field[i][1] += w.gamma * gp[1] * depth;
        }
    }

    Ok(TotalLoss {
        value: w.alpha * silog + w.beta * cosine + w.gamma * chamfer,
        silog,
        cosine,
        chamfer,
        grad_depth,
        grad_field,
    })
}

/// Total loss `alpha * silog + beta * cosine + gamma * chamfer` for a
/// residual field `v` over `vcano`. The predicted cloud is `D` unprojected
/// through the composed field; the target cloud is `D*` through `V*`.
pub fn total_loss(
    d: &DepthMap,
    dstar: &DepthMap,
    v: &IncidenceField,
    vcano: &IncidenceField,
    vstar: &IncidenceField,
    w: &LossWeights,
) -> Result<TotalLoss> {
    let composed = compose_residual(v, vcano)?;
    let mut out = total_loss_composed(d, dstar, &composed, vstar, w)?;
    out.grad_field = chain_through_composition(&out.grad_field, vcano);
    Ok(out)
}

fn dot3(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &Point3) -> f64 {
    dot3(a, a).sqrt()
}
