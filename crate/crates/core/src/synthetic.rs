//! Ground-truth scenes: analytic z-depth rendering of planes, spheres and
//! axis-aligned boxes, distance-constraint sampling, seeded noise and random
//! cameras. The camera sits at the origin looking down +z, y pointing down.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{focal_from_fov, unproject_pixel, DepthMap, Intrinsics, Point3};
use crate::error::{Error, Result};
use crate::solver::DistanceConstraint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite plane through `point`; only visible from the side `normal`
    /// points to.
    Plane {
        point: Point3,
        normal: Point3,
    },
    Sphere {
        center: Point3,
        radius: f64,
    },
    #[serde(rename = "box")]
    AxisBox {
        min: Point3,
        max: Point3,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let s = Self { primitives };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::DegenerateScene("scene has no primitives".into()));
        }
        for p in &self.primitives {
            let finite = |v: &Point3| v.iter().all(|c| c.is_finite());
            match p {
                Primitive::Plane { point, normal } => {
                    if !finite(point) || !finite(normal) || dot(normal, normal) == 0.0 {
                        return Err(Error::DegenerateScene(format!("invalid plane {p:?}")));
                    }
                    if dot(normal, point) == 0.0 {
                        return Err(Error::DegenerateScene("camera lies on a plane".into()));
                    }
                }
                Primitive::Sphere { center, radius } => {
                    if !finite(center) || !(radius.is_finite() && *radius > 0.0) {
                        return Err(Error::DegenerateScene(format!("invalid sphere {p:?}")));
                    }
                    if dot(center, center) <= radius * radius {
                        return Err(Error::DegenerateScene("camera inside a sphere".into()));
                    }
                }
                Primitive::AxisBox { min, max } => {
                    if !finite(min) || !finite(max) || (0..3).any(|k| !(min[k] < max[k])) {
                        return Err(Error::DegenerateScene(format!("invalid box {p:?}")));
                    }
                    if (0..3).all(|k| min[k] <= 0.0 && 0.0 <= max[k]) {
                        return Err(Error::DegenerateScene("camera inside a box".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Random room: back wall, floor, and a few boxes and spheres between the
    /// camera and the wall. Every pixel of a forward camera hits the wall.
    pub fn random_room(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wall_z = rng.random_range(6.0..12.0);
        let floor_y = rng.random_range(1.0..2.0);
        let mut primitives = vec![
            Primitive::Plane {
                point: [0.0, 0.0, wall_z],
                normal: [0.0, 0.0, -1.0],
            },
            Primitive::Plane {
                point: [0.0, floor_y, 0.0],
                normal: [0.0, -1.0, 0.0],
            },
        ];
        for _ in 0..rng.random_range(2..5) {
            let z = rng.random_range(1.5..wall_z - 1.0);
            let x = rng.random_range(-0.6..0.6) * z;
            let y = rng.random_range(-0.4..0.4) * z;
            let half = [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
            ];
            primitives.push(Primitive::AxisBox {
                min: [x - half[0], y - half[1], z - half[2]],
                max: [x + half[0], y + half[1], z + half[2]],
            });
        }
        for _ in 0..rng.random_range(1..3) {
            let z = rng.random_range(2.0..wall_z - 1.0);
            primitives.push(Primitive::Sphere {
                center: [rng.random_range(-0.5..0.5) * z, rng.random_range(-0.3..0.3) * z, z],
                radius: rng.random_range(0.3..1.0),
            });
        }
        Self { primitives }
    }
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Ray parameter `t` (equal to z-depth, since `dir.z == 1`) of the nearest
/// front-facing hit, if any.
fn intersect(p: &Primitive, dir: &Point3) -> Option<f64> {
    match p {
        Primitive::Plane { point, normal } => {
            let denom = dot(normal, dir);
            if denom >= 0.0 {
                return None;
            }
            let t = dot(normal, point) / denom;
            (t > 0.0).then_some(t)
        }
        Primitive::Sphere { center, radius } => {
            let a = dot(dir, dir);
            let b = dot(dir, center);
            let cc = dot(center, center) - radius * radius;
            let disc = b * b - a * cc;
            if disc < 0.0 || b <= 0.0 {
                return None;
            }
            // Near root (b - sqrt(disc)) / a in cancellation-free form.
            let t = cc / (b + disc.sqrt());
            (t > 0.0).then_some(t)
        }
        Primitive::AxisBox { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if dir[k] == 0.0 {
                    if 0.0 < min[k] || 0.0 > max[k] {
                        return None;
                    }
                    continue;
                }
                let a = min[k] / dir[k];
                let b = max[k] / dir[k];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            (t0 <= t1 && t0 > 0.0).then_some(t0)
        }
    }
}

/// Renders z-depth for every pixel; pixels whose ray hits nothing are invalid.
pub fn render_depth(scene: &SceneSpec, k: &Intrinsics) -> Result<DepthMap> {
    scene.validate()?;
    let (w, h) = (k.width(), k.height());
    let mut values = vec![f64::NAN; w * h];
    for v in 0..h {
        for u in 0..w {
            let dir = [(u as f64 - k.cx()) / k.fx(), (v as f64 - k.cy()) / k.fy(), 1.0];
            let hit = scene
                .primitives
                .iter()
                .filter_map(|p| intersect(p, &dir))
                .fold(f64::INFINITY, f64::min);
            if hit.is_finite() {
                values[v * w + u] = hit;
            }
        }
    }
    DepthMap::from_values(w, h, values)
}

/// Euclidean distance between the back-projections of two pixels.
pub fn pixel_distance(k: &Intrinsics, p1: [f64; 2], d1: f64, p2: [f64; 2], d2: f64) -> Result<f64> {
    let a = unproject_pixel(k, p1[0], p1[1], d1)?;
    let b = unproject_pixel(k, p2[0], p2[1], d2)?;
    Ok(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
}

/// Rejection attempts allowed per requested constraint.
const ATTEMPTS_PER_CONSTRAINT: usize = 2000;

/// Samples `count` pixel pairs with no pixel shared between pairs and depth
/// ratio `max(d1/d2, d2/d1) >= min_depth_ratio`; distances come from the
/// ground-truth camera.
pub fn sample_constraints(
    depth: &DepthMap,
    k: &Intrinsics,
    count: usize,
    seed: u64,
    min_depth_ratio: f64,
) -> Result<Vec<DistanceConstraint>> {
    depth.check_dims(k.width(), k.height())?;
    if !(min_depth_ratio >= 1.0) {
        return Err(Error::Domain(format!(
            "minimum depth ratio must be >= 1, got {min_depth_ratio}"
        )));
    }
    let mut pool: Vec<usize> = (0..depth.len()).filter(|&i| depth.valid()[i]).collect();
    if pool.len() < 2 {
        return Err(Error::SamplingFailure("fewer than two valid pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut used = vec![false; depth.len()];
    let w = depth.width();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > ATTEMPTS_PER_CONSTRAINT * count.max(1) {
            return Err(Error::SamplingFailure(format!(
                "found {} of {count} pairs with depth ratio >= {min_depth_ratio}",
                out.len()
            )));
        }
        let i = pool[rng.random_range(0..pool.len())];
        let j = pool[rng.random_range(0..pool.len())];
        if i == j || used[i] || used[j] {
            continue;
        }
        let (d1, d2) = (depth.values()[i], depth.values()[j]);
        if d1.max(d2) / d1.min(d2) < min_depth_ratio {
            continue;
        }
        let p1 = [(i % w) as f64, (i / w) as f64];
        let p2 = [(j % w) as f64, (j / w) as f64];
        let length = pixel_distance(k, p1, d1, p2, d2)?;
        out.push(DistanceConstraint::new(p1, p2, d1, d2, length)?);
        used[i] = true;
        used[j] = true;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub depth_sigma_rel: f64,
    pub distance_sigma_rel: f64,
    pub seed: u64,
}

/// Applies multiplicative log-normal noise `exp(sigma * g)` to depths and
/// distances. Depth and distance noise use independent streams, so changing
/// one sigma leaves the other output unchanged.
///
/// With depth noise, constraint depths are re-read from the noisy map when
/// their pixels are valid integer pixels of it. A distance that ends up below
/// the depth separation is raised to it.
pub fn perturb(
    constraints: &[DistanceConstraint],
    depth: &DepthMap,
    noise: &NoiseSpec,
) -> Result<(Vec<DistanceConstraint>, DepthMap)> {
    for s in [noise.depth_sigma_rel, noise.distance_sigma_rel] {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::Domain(format!("noise sigma must be finite and >= 0, got {s}")));
        }
    }
    let mut depth_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    depth_rng.set_stream(1);
    let mut dist_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    dist_rng.set_stream(2);

    let values: Vec<f64> = depth
        .values()
        .iter()
        .zip(depth.valid())
        .map(|(&d, &ok)| {
            let g: f64 = StandardNormal.sample(&mut depth_rng);
            if ok {
                d * (noise.depth_sigma_rel * g).exp()
            } else {
                d
            }
        })
        .collect();
    let noisy = DepthMap::new(depth.width(), depth.height(), values, depth.valid().to_vec())?;

    let lookup = |p: [f64; 2]| -> Option<f64> {
        if p[0] < 0.0 || p[1] < 0.0 || p[0].fract() != 0.0 || p[1].fract() != 0.0 {
            return None;
        }
        noisy.get(p[0] as usize, p[1] as usize)
    };

    let mut out = Vec::with_capacity(constraints.len());
    for c in constraints {
        let (mut d1, mut d2) = (c.d1(), c.d2());
        if noise.depth_sigma_rel > 0.0 {
            let g1: f64 = StandardNormal.sample(&mut depth_rng);
            let g2: f64 = StandardNormal.sample(&mut depth_rng);
            d1 = lookup(c.p1()).unwrap_or(d1 * (noise.depth_sigma_rel * g1).exp());
            d2 = lookup(c.p2()).unwrap_or(d2 * (noise.depth_sigma_rel * g2).exp());
        }
        let g: f64 = StandardNormal.sample(&mut dist_rng);
        let length = (c.length() * (noise.distance_sigma_rel * g).exp()).max((d1 - d2).abs());
        out.push(DistanceConstraint::new(c.p1(), c.p2(), d1, d2, length)?);
    }
    Ok((out, noisy))
}

/// Random camera: horizontal and vertical FoV drawn independently and
/// uniformly from `fov_range` (degrees, each measured across its own image
/// side), principal point at the image center plus uniform jitter in
/// `[-center_jitter, center_jitter]` pixels.
pub fn make_camera(
    seed: u64,
    width: usize,
    height: usize,
    fov_range: (f64, f64),
    center_jitter: f64,
) -> Result<Intrinsics> {
    let (lo, hi) = fov_range;
    if !(lo > 0.0 && hi < 180.0 && lo <= hi) {
        return Err(Error::Domain(format!("invalid FoV range {fov_range:?}")));
    }
    if !(center_jitter.is_finite() && center_jitter >= 0.0) {
        return Err(Error::Domain(format!("invalid center jitter {center_jitter}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |a: f64, b: f64| if a == b { a } else { rng.random_range(a..=b) };
    let fov_x = draw(lo, hi);
    let fov_y = draw(lo, hi);
    let jx = draw(-center_jitter, center_jitter);
    let jy = draw(-center_jitter, center_jitter);
    Intrinsics::new(
        focal_from_fov(fov_x, width as f64)?,
        focal_from_fov(fov_y, height as f64)?,
        width as f64 / 2.0 + jx,
        height as f64 / 2.0 + jy,
        width,
        height,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::unproject_depth_map;
    use crate::solver::{coefficients_from_constraint, constraint_residual, SolverParams};

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn wall(z: f64) -> Primitive {
        Primitive::Plane {
            point: [0.0, 0.0, z],
            normal: [0.0, 0.0, -1.0],
        }
    }

    #[test]
    fn plane_renders_constant() {
        let d = render_depth(&SceneSpec::new(vec![wall(2.0)]).unwrap(), &k()).unwrap();
        assert_eq!(d.valid_count(), 640 * 480);
        assert!(d.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn sphere_on_axis() {
        let s = SceneSpec::new(vec![Primitive::Sphere {
            center: [0.0, 0.0, 5.0],
            radius: 1.0,
        }])
        .unwrap();
        let d = render_depth(&s, &k()).unwrap();
        assert_eq!(d.get(320, 240), Some(4.0));
        assert_eq!(d.get(0, 0), None);
    }

    #[test]
    fn box_front_face() {
        let s = SceneSpec::new(vec![Primitive::AxisBox {
            min: [-1.0, -1.0, 3.0],
            max: [1.0, 1.0, 4.0],
        }])
        .unwrap();
        let d = render_depth(&s, &k()).unwrap();
        assert_eq!(d.get(320, 240), Some(3.0));
        assert_eq!(d.get(0, 0), None);
    }

    #[test]
    fn degenerate_scenes() {
        let inside_sphere = SceneSpec::new(vec![Primitive::Sphere {
            center: [0.0, 0.0, 0.5],
            radius: 1.0,
        }]);
        assert!(matches!(inside_sphere, Err(Error::DegenerateScene(_))));
        let inside_box = SceneSpec::new(vec![Primitive::AxisBox {
            min: [-1.0; 3],
            max: [1.0; 3],
        }]);
        assert!(matches!(inside_box, Err(Error::DegenerateScene(_))));
        assert!(SceneSpec::new(vec![]).is_err());
    }

    #[test]
    fn tilted_plane_satisfies_plane_equation() {
        let n = [0.1, -0.7, -0.6];
        let p0 = [0.0, 1.0, 3.0];
        let s = SceneSpec::new(vec![Primitive::Plane { point: p0, normal: n }]).unwrap();
        let d = render_depth(&s, &k()).unwrap();
        assert!(d.valid_count() > 1000);
        for p in unproject_depth_map(&k(), &d).unwrap().points {
            let r = n[0] * (p[0] - p0[0]) + n[1] * (p[1] - p0[1]) + n[2] * (p[2] - p0[2]);
            assert!(r.abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_constraints_are_consistent() {
        let scene = SceneSpec::random_room(3);
        let d = render_depth(&scene, &k()).unwrap();
        let cs = sample_constraints(&d, &k(), 50, 7, 1.2).unwrap();
        let truth = SolverParams::from_intrinsics(&k());
        let mut seen = std::collections::HashSet::new();
        for c in &cs {
            assert!(c.length() >= (c.d1() - c.d2()).abs());
            assert!(c.d1().max(c.d2()) / c.d1().min(c.d2()) >= 1.2);
            let r = constraint_residual(&coefficients_from_constraint(c), &truth);
            assert!((r / c.length().powi(2)).abs() < 1e-10);
            for p in [c.p1(), c.p2()] {
                assert!(seen.insert((p[0] as i64, p[1] as i64)), "pixel reused");
            }
        }
        assert_eq!(cs, sample_constraints(&d, &k(), 50, 7, 1.2).unwrap());
    }

    #[test]
    fn constant_plane_cannot_meet_ratio() {
        let d = render_depth(&SceneSpec::new(vec![wall(2.0)]).unwrap(), &k()).unwrap();
        assert!(matches!(
            sample_constraints(&d, &k(), 4, 1, 1.2),
            Err(Error::SamplingFailure(_))
        ));
    }

    #[test]
    fn perturb_zero_sigma_is_identity_and_seeded() {
        let d = render_depth(&SceneSpec::random_room(1), &k()).unwrap();
        let cs = sample_constraints(&d, &k(), 10, 2, 1.2).unwrap();
        let zero = NoiseSpec {
            depth_sigma_rel: 0.0,
            distance_sigma_rel: 0.0,
            seed: 4,
        };
        let (c0, d0) = perturb(&cs, &d, &zero).unwrap();
        assert_eq!(c0, cs);
        assert_eq!(d0, d);
        let noisy = NoiseSpec {
            depth_sigma_rel: 0.01,
            distance_sigma_rel: 0.02,
            seed: 4,
        };
        assert_eq!(perturb(&cs, &d, &noisy).unwrap(), perturb(&cs, &d, &noisy).unwrap());
        let dist_only = NoiseSpec {
            depth_sigma_rel: 0.0,
            distance_sigma_rel: 0.01,
            seed: 4,
        };
        let (c1, d1) = perturb(&cs, &d, &dist_only).unwrap();
        assert_eq!(d1, d);
        assert_ne!(c1, cs);
    }

    #[test]
    fn distance_noise_has_requested_log_std() {
        let c = DistanceConstraint::new([0.0, 0.0], [10.0, 0.0], 2.0, 2.0, 1.0).unwrap();
        let cs = vec![c; 10_000];
        let d = DepthMap::constant(2, 2, 1.0).unwrap();
        let sigma = 0.05;
        let (out, _) = perturb(
            &cs,
            &d,
            &NoiseSpec {
                depth_sigma_rel: 0.0,
                distance_sigma_rel: sigma,
                seed: 99,
            },
        )
        .unwrap();
        let logs: Vec<f64> = out.iter().map(|c| c.length().ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64;
        assert!((var.sqrt() - sigma).abs() < 0.05 * sigma);
    }

    #[test]
    fn camera_draws() {
        let k = make_camera(1, 640, 480, (90.0, 90.0), 0.0).unwrap();
        assert!((k.fx() - 320.0).abs() < 1e-9);
        assert_eq!(k.cx(), 320.0);
        for seed in 0..1000 {
            let k = make_camera(seed, 640, 480, (40.0, 120.0), 20.0).unwrap();
            assert!((40.0 - 1e-9..=120.0 + 1e-9).contains(&k.fov_x()));
            assert!((40.0 - 1e-9..=120.0 + 1e-9).contains(&k.fov_y()));
            assert!((k.cx() - 320.0).abs() <= 20.0 && (k.cy() - 240.0).abs() <= 20.0);
        }
        assert_eq!(
            make_camera(5, 640, 480, (40.0, 120.0), 20.0).unwrap(),
            make_camera(5, 640, 480, (40.0, 120.0), 20.0).unwrap()
        );
    }
}
