//! Distortion-free pinhole camera: intrinsics, depth maps, unprojection and
//! focal/FoV conversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D point or vector in meters.
pub type Point3 = [f64; 3];

/// 4-DoF pinhole intrinsics plus the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl Intrinsics {
    /// Builds intrinsics, rejecting non-positive focal lengths, non-finite
    /// principal points and images smaller than 2x2. The principal point may
    /// lie outside the image.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx.is_finite() && fx > 0.0) || !(fy.is_finite() && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be finite and positive (fx={fx}, fy={fy})"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point must be finite (cx={cx}, cy={cy})"
            )));
        }
        if width < 2 || height < 2 {
            return Err(Error::InvalidIntrinsics(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    /// Horizontal field of view in degrees.
    pub fn fov_x(&self) -> f64 {
        fov_from_focal(self.fx, self.width as f64).expect("validated focal length")
    }

    /// Vertical field of view in degrees.
    pub fn fov_y(&self) -> f64 {
        fov_from_focal(self.fy, self.height as f64).expect("validated focal length")
    }

    /// Perspective projection of a camera-frame point to continuous pixel
    /// coordinates.
    pub fn project(&self, p: Point3) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// Same parameters attached to a different image size.
    pub fn with_size(&self, width: usize, height: usize) -> Result<Self> {
        Self::new(self.fx, self.fy, self.cx, self.cy, width, height)
    }
}

/// Row-major grid of metric depths with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a depth map from explicit values and mask. Every valid entry
    /// must be finite and strictly positive; invalid entries are unconstrained.
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || valid.len() != n {
            return Err(Error::shape(
                format!("{n} values and mask entries ({width}x{height})"),
                format!("{} values, {} mask entries", values.len(), valid.len()),
            ));
        }
        if let Some(bad) = values
            .iter()
            .zip(&valid)
            .find(|(d, &ok)| ok && !(d.is_finite() && **d > 0.0))
        {
            return Err(Error::InvalidDepth(*bad.0));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Builds a depth map whose mask is derived from the values: finite and
    /// positive entries are valid, NaN, infinities and `<= 0` are not.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::new(width, height, values, valid)
    }

    /// Map with the same depth at every pixel.
    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::from_values(width, height, vec![depth; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    /// Depth at integer pixel `(u, v)`, `None` when out of bounds or masked.
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let i = self.index(u, v);
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Row-major iterator over valid pixels as `(u, v, depth)`.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, &ok))| ok)
            .map(move |(i, (&d, _))| (i % w, i / w, d))
    }

    /// Every valid depth multiplied by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Domain(format!("depth scale must be positive, got {s}")));
        }
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&d, &ok)| if ok { d * s } else { d })
            .collect();
        Self::new(self.width, self.height, values, self.valid.clone())
    }

    /// Copy with an additional mask applied (pixels stay valid only where both
    /// masks agree).
    pub fn masked(&self, keep: impl Fn(usize, f64) -> bool) -> Self {
        let valid = self
            .valid
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (&ok, &d))| ok && keep(i, d))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            values: self.values.clone(),
            valid,
        }
    }

    pub(crate) fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::shape(
                format!("{width}x{height}"),
                format!("{}x{}", self.width, self.height),
            ));
        }
        Ok(())
    }
}

/// Unordered set of 3D points in meters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lifts pixel `(u, v)` at z-depth `d` into the camera frame.
pub fn unproject_pixel(k: &Intrinsics, u: f64, v: f64, d: f64) -> Result<Point3> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::InvalidDepth(d));
    }
    // Ray first, then scale: keeps this bit-identical to incidence-field
    // unprojection.
    let rx = (u - k.cx) / k.fx;
    let ry = (v - k.cy) / k.fy;
    Ok([rx * d, ry * d, d])
}

/// One point per valid pixel, in row-major order. Invalid pixels are skipped.
pub fn unproject_depth_map(k: &Intrinsics, depth: &DepthMap) -> Result<PointCloud> {
    depth.check_dims(k.width, k.height)?;
    let points = depth
        .iter_valid()
        .map(|(u, v, d)| unproject_pixel(k, u as f64, v as f64, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointCloud { points })
}

/// Field of view in degrees spanned by `extent` pixels at focal length `f`.
pub fn fov_from_focal(f: f64, extent: f64) -> Result<f64> {
    if !(f.is_finite() && f > 0.0) {
        return Err(Error::InvalidIntrinsics(format!(
            "focal length must be positive, got {f}"
        )));
    }
    if !(extent >= 1.0) {
        return Err(Error::Domain(format!("extent must be >= 1, got {extent}")));
    }
    Ok(2.0 * (extent / (2.0 * f)).atan().to_degrees())
}

/// Focal length in pixels giving `fov` degrees across `extent` pixels.
pub fn focal_from_fov(fov: f64, extent: f64) -> Result<f64> {
    if !(fov > 0.0 && fov < 180.0) {
        return Err(Error::Domain(format!(
            "field of view must lie in (0, 180) degrees, got {fov}"
        )));
    }
    if !(extent >= 1.0) {
        return Err(Error::Domain(format!("extent must be >= 1, got {extent}")));
    }
    Ok(extent / (2.0 * (fov.to_radians() / 2.0).tan()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k500() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn principal_pixel_maps_to_axis() {
        assert_eq!(unproject_pixel(&k500(), 320.0, 240.0, 2.0).unwrap(), [0.0, 0.0, 2.0]);
    }

    #[test]
    fn off_axis_pixel() {
        let p = unproject_pixel(&k500(), 420.0, 240.0, 2.0).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-15);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 2.0);
    }

    #[test]
    fn doubling_depth_doubles_point() {
        let a = unproject_pixel(&k500(), 17.0, 401.0, 1.3).unwrap();
        let b = unproject_pixel(&k500(), 17.0, 401.0, 2.6).unwrap();
        for i in 0..3 {
            assert_eq!(b[i], 2.0 * a[i]);
        }
    }

    #[test]
    fn bad_depth_rejected() {
        for d in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                unproject_pixel(&k500(), 0.0, 0.0, d),
                Err(Error::InvalidDepth(_))
            ));
        }
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, f64::NAN, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 4).is_err());
        // off-center principal points are fine
        assert!(Intrinsics::new(1.0, 1.0, -50.0, 900.0, 4, 4).is_ok());
    }

    #[test]
    fn all_invalid_map_gives_empty_cloud() {
        let d = DepthMap::from_values(640, 480, vec![f64::NAN; 640 * 480]).unwrap();
        assert!(unproject_depth_map(&k500(), &d).unwrap().is_empty());
    }

    #[test]
    fn tiny_map_single_point() {
        let k = Intrinsics::new(500.0, 500.0, 0.0, 0.0, 2, 2).unwrap();
        let d = DepthMap::new(2, 2, vec![2.0, 1.0, 1.0, 1.0], vec![true, false, false, false]).unwrap();
        let cloud = unproject_depth_map(&k, &d).unwrap();
        assert_eq!(cloud.points, vec![[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn constant_plane_extent() {
        let d = DepthMap::constant(640, 480, 2.0).unwrap();
        let cloud = unproject_depth_map(&k500(), &d).unwrap();
        assert_eq!(cloud.len(), 640 * 480);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for p in &cloud.points {
            assert_eq!(p[2], 2.0);
            lo = lo.min(p[0]);
            hi = hi.max(p[0]);
        }
        assert!((lo + 1.28).abs() < 1e-12);
        assert!((hi - 1.276).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let d = DepthMap::constant(4, 4, 1.0).unwrap();
        assert!(matches!(unproject_depth_map(&k500(), &d), Err(Error::Shape { .. })));
    }

    #[test]
    fn depth_map_rejects_bad_valid_values() {
        assert!(DepthMap::new(2, 1, vec![1.0, -1.0], vec![true, true]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, -1.0], vec![true, false]).is_ok());
        assert!(DepthMap::new(2, 1, vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn fov_values() {
        assert!((fov_from_focal(320.0, 640.0).unwrap() - 90.0).abs() < 1e-12);
        assert!((fov_from_focal(500.0, 640.0).unwrap() - 65.238486).abs() < 1e-3);
        assert!((focal_from_fov(90.0, 640.0).unwrap() - 320.0).abs() < 1e-9);
        assert!((focal_from_fov(65.2384861, 640.0).unwrap() - 500.0).abs() < 1e-3);
        assert!(matches!(focal_from_fov(180.0, 640.0), Err(Error::Domain(_))));
        assert!(matches!(focal_from_fov(0.0, 640.0), Err(Error::Domain(_))));
        assert!(matches!(fov_from_focal(0.0, 640.0), Err(Error::InvalidIntrinsics(_))));
    }

    proptest! {
        #[test]
        fn fov_round_trip(f in 1.0f64..1e5, extent in 1.0f64..1e4) {
            let fov = fov_from_focal(f, extent).unwrap();
            let back = focal_from_fov(fov, extent).unwrap();
            prop_assert!(((back - f) / f).abs() < 1e-10);
        }

        #[test]
        fn fov_strictly_decreasing(f in 1.0f64..1e4, df in 1e-3f64..100.0) {
            prop_assert!(fov_from_focal(f + df, 640.0).unwrap() < fov_from_focal(f, 640.0).unwrap());
        }

        #[test]
        fn reprojection_recovers_pixel(
            fx in 50.0f64..3000.0, fy in 50.0f64..3000.0,
            cx in -100.0f64..800.0, cy in -100.0f64..600.0,
            u in 0.0f64..640.0, v in 0.0f64..480.0, d in 0.05f64..100.0,
        ) {
            let k = Intrinsics::new(fx, fy, cx, cy, 640, 480).unwrap();
            let p = unproject_pixel(&k, u, v, d).unwrap();
            let (pu, pv) = k.project(p);
            prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }

        #[test]
        fn principal_point_shift(delta in -50.0f64..50.0, u in 0u32..64, d in 0.1f64..20.0) {
            let k = Intrinsics::new(300.0, 310.0, 32.0, 24.0, 64, 48).unwrap();
            let k2 = Intrinsics::new(300.0, 310.0, 32.0 + delta, 24.0, 64, 48).unwrap();
            let a = unproject_pixel(&k, u as f64, 5.0, d).unwrap();
            let b = unproject_pixel(&k2, u as f64, 5.0, d).unwrap();
            prop_assert!((b[0] - a[0] + delta * d / 300.0).abs() < 1e-12 * (1.0 + a[0].abs()) * 10.0);
        }
    }
}
