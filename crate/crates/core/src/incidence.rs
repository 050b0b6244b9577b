//! Incidence fields: the per-pixel ray encoding of pinhole intrinsics.
//!
//! Rays are stored in z=1 form, `((u - cx) / fx, (v - cy) / fy, 1)`, so that a
//! ray times a z-depth is directly the 3D point. Unit normalization only
//! happens inside the cosine loss.
//!
//! A predicted field is expressed as a multiplicative residual over a fixed
//! canonical field: per pixel, `gt.x = res.x * cano.x` and `gt.y = res.y *
//! cano.y`, with z pinned at 1.

use serde::{Deserialize, Serialize};

use crate::camera::{focal_from_fov, DepthMap, Intrinsics, Point3, PointCloud};
use crate::error::{Error, Result};

/// Canonical ray components at or below this magnitude are treated as
/// singular when dividing out a residual.
pub const DEFAULT_SINGULAR_EPS: f64 = 1e-6;

/// Default canonical field of view, applied across the larger image side.
pub const DEFAULT_CANONICAL_FOV_DEG: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceField {
    width: usize,
    height: usize,
    rays: Vec<Point3>,
}

impl IncidenceField {
    pub fn new(width: usize, height: usize, rays: Vec<Point3>) -> Result<Self> {
        if rays.len() != width * height {
            return Err(Error::shape(
                format!("{} rays ({width}x{height})", width * height),
                format!("{} rays", rays.len()),
            ));
        }
        if rays.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Domain("incidence rays must be finite".into()));
        }
        Ok(Self { width, height, rays })
    }

    /// Converts a field of arbitrarily scaled rays (for example unit-normalized
    /// network output) to z=1 form by dividing each ray by its third component.
    pub fn from_scaled_rays(width: usize, height: usize, rays: Vec<Point3>) -> Result<Self> {
        let rays = rays
            .into_iter()
            .map(|r| {
                if !(r[2].is_finite() && r[2].abs() > f64::EPSILON) {
                    return Err(Error::Domain(format!("ray {r:?} has no forward component")));
                }
                Ok([r[0] / r[2], r[1] / r[2], 1.0])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, rays)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn len(&self) -> usize {
        self.rays.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
    pub fn rays(&self) -> &[Point3] {
        &self.rays
    }

    pub fn ray(&self, u: usize, v: usize) -> Point3 {
        self.rays[v * self.width + u]
    }

    pub(crate) fn check_same_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::shape(
                format!("{width}x{height}"),
                format!("{}x{}", self.width, self.height),
            ));
        }
        Ok(())
    }
}

/// Prior camera that a residual field is expressed against: one focal length
/// for both axes and a principal point that defaults to the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalCamera {
    pub f_c: f64,
    pub u_c: f64,
    pub v_c: f64,
}

impl CanonicalCamera {
    /// Canonical camera with [`DEFAULT_CANONICAL_FOV_DEG`] across the larger
    /// image side, centered on the image.
    pub fn for_image(width: usize, height: usize) -> Result<Self> {
        Self::with_fov(DEFAULT_CANONICAL_FOV_DEG, width, height)
    }

    pub fn with_fov(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let f_c = focal_from_fov(fov_deg, width.max(height) as f64)?;
        Ok(Self {
            f_c,
            u_c: width as f64 / 2.0,
            v_c: height as f64 / 2.0,
        })
    }

    pub fn to_intrinsics(&self, width: usize, height: usize) -> Result<Intrinsics> {
        Intrinsics::new(self.f_c, self.f_c, self.u_c, self.v_c, width, height)
    }
}

fn ray_for(fx: f64, fy: f64, cx: f64, cy: f64, u: usize, v: usize) -> Point3 {
    [(u as f64 - cx) / fx, (v as f64 - cy) / fy, 1.0]
}

fn build_field(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> IncidenceField {
    let rays = (0..height)
        .flat_map(|v| (0..width).map(move |u| ray_for(fx, fy, cx, cy, u, v)))
        .collect();
    IncidenceField { width, height, rays }
}

pub fn field_from_intrinsics(k: &Intrinsics) -> IncidenceField {
    build_field(k.width(), k.height(), k.fx(), k.fy(), k.cx(), k.cy())
}

pub fn canonical_field(c: &CanonicalCamera, width: usize, height: usize) -> Result<IncidenceField> {
    if !(c.f_c.is_finite() && c.f_c > 0.0) {
        return Err(Error::InvalidIntrinsics(format!(
            "canonical focal length must be positive, got {}",
            c.f_c
        )));
    }
    Ok(build_field(width, height, c.f_c, c.f_c, c.u_c, c.v_c))
}

/// Applies a residual field to the canonical field: x and y multiply
/// component-wise, z stays 1.
pub fn compose_residual(res: &IncidenceField, cano: &IncidenceField) -> Result<IncidenceField> {
    res.check_same_dims(cano.width, cano.height)?;
    let rays = res
        .rays
        .iter()
        .zip(&cano.rays)
        .map(|(r, c)| [r[0] * c[0], r[1] * c[1], 1.0])
        .collect();
    Ok(IncidenceField {
        width: cano.width,
        height: cano.height,
        rays,
    })
}

/// Residual of `gt` relative to `cano`, plus the mask of pixels where either
/// canonical component has magnitude `<= eps`.
///
/// Components with a singular canonical value are set to 1; the other
/// component of the same pixel is still divided out.
pub fn extract_residual(gt: &IncidenceField, cano: &IncidenceField, eps: f64) -> Result<(IncidenceField, Vec<bool>)> {
    gt.check_same_dims(cano.width, cano.height)?;
    let mut mask = Vec::with_capacity(gt.len());
    let rays = gt
        .rays
        .iter()
        .zip(&cano.rays)
        .map(|(g, c)| {
            let sx = c[0].abs() <= eps;
            let sy = c[1].abs() <= eps;
            mask.push(sx || sy);
            [
                if sx { 1.0 } else { exact_quotient(g[0], c[0]) },
                if sy { 1.0 } else { exact_quotient(g[1], c[1]) },
                1.0,
            ]
        })
        .collect();
    Ok((
        IncidenceField {
            width: gt.width,
            height: gt.height,
            rays,
        },
        mask,
    ))
}

/// `g / c`, nudged by a few ulps so that multiplying back by `c` lands as
/// close to `g` as representable. Bit-exact recovery is not always possible:
/// when `|c| < 1` the products of neighbouring quotients can step over `g`,
/// leaving a one-ulp gap.
fn exact_quotient(g: f64, c: f64) -> f64 {
    let q = g / c;
    if q * c == g {
        return q;
    }
    let miss = |r: f64| (r * c - g).abs();
    let mut best = q;
    let (mut up, mut down) = (q, q);
    for _ in 0..4 {
        up = up.next_up();
        down = down.next_down();
        for cand in [up, down] {
            if cand * c == g {
                return cand;
            }
            if miss(cand) < miss(best) {
                best = cand;
            }
        }
    }
    best
}

/// Recovers intrinsics from a z=1 field by two independent linear
/// regressions, `u = fx * ray.x + cx` and `v = fy * ray.y + cy`, over the
/// pixels where `mask` is true (all pixels when `mask` is `None`).
pub fn fit_intrinsics_from_field(field: &IncidenceField, mask: Option<&[bool]>) -> Result<Intrinsics> {
    if let Some(m) = mask {
        if m.len() != field.len() {
            return Err(Error::shape(field.len(), m.len()));
        }
    }
    let w = field.width;
    let used = |i: usize| mask.is_none_or(|m| m[i]);

    let samples_x: Vec<(f64, f64)> = (0..field.len())
        .filter(|&i| used(i))
        .map(|i| (field.rays[i][0], (i % w) as f64))
        .collect();
    let samples_y: Vec<(f64, f64)> = (0..field.len())
        .filter(|&i| used(i))
        .map(|i| (field.rays[i][1], (i / w) as f64))
        .collect();

    let (fx, cx) = fit_line(&samples_x, "column")?;
    let (fy, cy) = fit_line(&samples_y, "row")?;
    Intrinsics::new(fx, fy, cx, cy, field.width, field.height)
}

/// Least-squares `(slope, intercept)` of `pixel = slope * ray + intercept`.
fn fit_line(samples: &[(f64, f64)], axis: &str) -> Result<(f64, f64)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::DegenerateField("no unmasked pixels".into()))?;
    if samples.iter().all(|s| s.1 == first.1) {
        return Err(Error::DegenerateField(format!("all unmasked pixels share one {axis}")));
    }
    let n = samples.len() as f64;
    let mean_r = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_p = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (mut srr, mut srp) = (0.0, 0.0);
    for &(r, p) in samples {
        srr += (r - mean_r) * (r - mean_r);
        srp += (r - mean_r) * (p - mean_p);
    }
    if srr <= 0.0 || !srr.is_finite() {
        return Err(Error::DegenerateField(format!(
            "ray components do not vary along the {axis} axis"
        )));
    }
    let slope = srp / srr;
    Ok((slope, mean_p - slope * mean_r))
}

/// Point per valid pixel, `depth * ray`, in row-major order.
pub fn unproject_with_field(field: &IncidenceField, depth: &DepthMap) -> Result<PointCloud> {
    depth.check_dims(field.width, field.height)?;
    let points = depth
        .iter_valid()
        .map(|(u, v, d)| {
            let r = field.ray(u, v);
            [r[0] * d, r[1] * d, r[2] * d]
        })
        .collect();
    Ok(PointCloud { points })
}
