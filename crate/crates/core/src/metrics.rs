//! Evaluation metrics for depth, focal length (as FoV) and 3D shape.

use serde::{Deserialize, Serialize};

use crate::camera::{fov_from_focal, DepthMap, Intrinsics, PointCloud};
use crate::error::{Error, Result};
use crate::losses::chamfer_distance;
use crate::nn::nearest_neighbors;

/// F1 thresholds (meters) reported by default.
pub const DEFAULT_F1_THRESHOLDS: [f64; 5] = [0.05, 0.1, 0.3, 0.5, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub a_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub n_valid: usize,
}

/// Standard monocular depth metrics over pixels valid in both maps with
/// ground truth in `(0, cap]`. Capping masks pixels; it never clamps values.
pub fn depth_metrics(d: &DepthMap, dstar: &DepthMap, cap: f64) -> Result<DepthMetrics> {
    d.check_dims(dstar.width(), dstar.height())?;
    let pairs: Vec<(f64, f64)> = (0..d.len())
        .filter(|&i| d.valid()[i] && dstar.valid()[i] && dstar.values()[i] <= cap)
        .map(|i| (d.values()[i], dstar.values()[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let n = pairs.len() as f64;
    let mut hits = [0usize; 3];
    let (mut a_rel, mut sq_rel, mut sq, mut sq_log, mut l10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, g) in &pairs {
        let ratio = (p / g).max(g / p);
        for (i, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *hit += 1;
            }
        }
        let diff = p - g;
        a_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        l10 += (p.log10() - g.log10()).abs();
    }
    Ok(DepthMetrics {
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        a_rel: a_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        log10: l10 / n,
        n_valid: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FovAxis {
    X,
    Y,
    /// Average of the horizontal and vertical errors.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FovErrorStats {
    pub mean: f64,
    pub median: f64,
    pub per_sample: Vec<f64>,
}

/// Absolute FoV error in degrees per sample, with mean and median.
pub fn fov_error_stats(pred: &[Intrinsics], gt: &[Intrinsics], axis: FovAxis) -> Result<FovErrorStats> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            format!("{} samples", gt.len()),
            format!("{} samples", pred.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Domain("no samples to evaluate".into()));
    }
    let per_sample: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let ex = (p.fov_x() - g.fov_x()).abs();
            let ey = (p.fov_y() - g.fov_y()).abs();
            match axis {
                FovAxis::X => ex,
                FovAxis::Y => ey,
                FovAxis::Both => 0.5 * (ex + ey),
            }
        })
        .collect();
    Ok(FovErrorStats {
        mean: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        median: median(&per_sample),
        per_sample,
    })
}

/// FoV error in degrees for one focal length pair over the same extent.
pub fn fov_error(f_pred: f64, f_gt: f64, extent: f64) -> Result<f64> {
    Ok((fov_from_focal(f_pred, extent)? - fov_from_focal(f_gt, extent)?).abs())
}

/// Median with midpoint averaging for even lengths. `values` must be
/// non-empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// F1 of precision (fraction of `p` within `tau` of `q`) and recall (fraction
/// of `q` within `tau` of `p`), in raw metric coordinates.
pub fn f1_at_threshold(p: &PointCloud, q: &PointCloud, tau: f64) -> Result<f64> {
    Ok(f1_scores(p, q, &[tau])?[0])
}

fn f1_scores(p: &PointCloud, q: &PointCloud, taus: &[f64]) -> Result<Vec<f64>> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Domain(format!("F1 threshold must be positive, got {t}")));
    }
    let p_to_q = nearest_neighbors(&p.points, &q.points);
    let q_to_p = nearest_neighbors(&q.points, &p.points);
    Ok(taus
        .iter()
        .map(|&tau| {
            let t2 = tau * tau;
            let precision = p_to_q.iter().filter(|(_, d2)| *d2 <= t2).count() as f64 / p.len() as f64;
            let recall = q_to_p.iter().filter(|(_, d2)| *d2 <= t2).count() as f64 / q.len() as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    /// `(threshold in meters, F1)` in ascending threshold order.
    pub f1: Vec<(f64, f64)>,
    pub chamfer: f64,
}

pub fn shape_metrics(p: &PointCloud, q: &PointCloud, thresholds: &[f64]) -> Result<ShapeMetrics> {
    let mut taus = thresholds.to_vec();
    taus.sort_by(f64::total_cmp);
    let scores = f1_scores(p, q, &taus)?;
    Ok(ShapeMetrics {
        f1: taus.into_iter().zip(scores).collect(),
        chamfer: chamfer_distance(p, q)?.value,
    })
}
