//! Metric 3D structure from single-view depth.
//!
//! The crate ties together a distortion-free pinhole model, its per-pixel
//! incidence-field encoding, a Levenberg-Marquardt calibration solver that
//! recovers `fx, fy, cx, cy` from a depth map plus a handful of known 3D
//! distances, the depth/ray/point-cloud losses used to train joint
//! depth-and-intrinsics estimators, and the standard evaluation metrics.
//!
//! Everything operates on plain row-major grids of `f64`. Pixel `(i, j)` is
//! taken at continuous coordinate `(i, j)`, with no half-pixel offset.

pub mod camera;
pub mod error;
pub mod incidence;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod refine;
pub mod solver;
pub mod synthetic;

pub use camera::{
    focal_from_fov, fov_from_focal, unproject_depth_map, unproject_pixel, DepthMap, Intrinsics, Point3, PointCloud,
};
pub use error::{Error, Result};
pub use incidence::{
    canonical_field, compose_residual, extract_residual, field_from_intrinsics, fit_intrinsics_from_field,
    unproject_with_field, CanonicalCamera, IncidenceField,
};
pub use solver::{
    coefficients_from_constraint, constraint_residual, huber_delta, minimal_roots, solve_minimal, solve_overdetermined,
    solve_robust, ConstraintCoefficients, DistanceConstraint, LmConfig, RobustLoss, SolveReport, SolverParams,
};
