//! Exact nearest-neighbour queries for Chamfer distance and F1.
//!
//! Small problems use a brute-force scan. Larger ones use a uniform hash grid
//! searched in expanding Chebyshev rings; the search only stops once no
//! unvisited cell can hold a point closer than the current best, so results
//! are identical to brute force, including the lowest-index tie-break.

use rustc_hash::FxHashMap;

use crate::camera::Point3;

/// Below this many targets (or queries) the brute-force path is used.
pub const BRUTE_FORCE_LIMIT: usize = 500;

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Nearest target to `q` as `(index, squared distance)`; ties go to the lowest
/// index. `targets` must be non-empty.
pub fn brute_force_nearest(targets: &[Point3], q: &Point3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, t) in targets.iter().enumerate() {
        let d = dist2(t, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub struct PointGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    origin: Point3,
    lo: [i64; 3],
    hi: [i64; 3],
    /// Point indices sorted by cell, ascending within a cell.
    order: Vec<usize>,
    /// Cell key to its `start..end` range in `order`.
    cells: FxHashMap<[i64; 3], (usize, usize)>,
}

impl<'a> PointGrid<'a> {
    /// Indexes `points` (non-empty) with a cell size near the median
    /// nearest-neighbour spacing.
    pub fn build(points: &'a [Point3]) -> Self {
        Self::build_for(points, &[])
    }

    /// Like [`PointGrid::build`], but cells are also made at least as large
    /// as the 75th-percentile distance from a sample of `queries` to `points`, so a
    /// query set far from the targets does not need many ring expansions.
    pub fn build_for(points: &'a [Point3], queries: &[Point3]) -> Self {
        assert!(!points.is_empty(), "grid needs at least one point");
        let mut origin = points[0];
        let mut upper = points[0];
        for p in points {
            for k in 0..3 {
                origin[k] = origin[k].min(p[k]);
                upper[k] = upper[k].max(p[k]);
            }
        }
        let cell = estimate_cell_size(points, &origin, &upper).max(query_offset(points, queries));
        let mut grid = Self {
            points,
            cell,
            origin,
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
            order: Vec::new(),
            cells: FxHashMap::default(),
        };
        let mut keyed: Vec<([i64; 3], usize)> = points.iter().enumerate().map(|(i, p)| (grid.key(p), i)).collect();
        keyed.sort_unstable();
        for (key, _) in &keyed {
            for k in 0..3 {
                grid.lo[k] = grid.lo[k].min(key[k]);
                grid.hi[k] = grid.hi[k].max(key[k]);
            }
        }
        let mut start = 0;
        for (j, w) in keyed.iter().enumerate() {
            if j + 1 == keyed.len() || keyed[j + 1].0 != w.0 {
                grid.cells.insert(w.0, (start, j + 1));
                start = j + 1;
            }
        }
        grid.order = keyed.into_iter().map(|(_, i)| i).collect();
        grid
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn key(&self, p: &Point3) -> [i64; 3] {
        let mut k = [0i64; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            k[a] = f.clamp(-1e15, 1e15) as i64;
        }
        k
    }

    /// Same contract as [`brute_force_nearest`].
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let qk = self.key(q);
        // Rings closer than the occupied box are empty.
        let mut r0 = 0i64;
        let mut r_max = 0i64;
        for a in 0..3 {
            let below = self.lo[a] - qk[a];
            let above = qk[a] - self.hi[a];
            r0 = r0.max(below).max(above);
            r_max = r_max.max((qk[a] - self.lo[a]).abs()).max((self.hi[a] - qk[a]).abs());
        }

        let mut best = (usize::MAX, f64::INFINITY);
        // Past this many cell visits a plain scan is cheaper.
        let budget = self.points.len() / 16 + 27;
        let mut visited = 0usize;
        for r in r0..=r_max {
            let complete = self.for_ring(qk, r, |key| {
                visited += 1;
                if let Some(&(a, b)) = self.cells.get(&key) {
                    for &i in &self.order[a..b] {
                        let d = dist2(&self.points[i], q);
                        if d < best.1 || (d == best.1 && i < best.0) {
                            best = (i, d);
                        }
                    }
                }
                visited <= budget
            });
            if !complete {
                return brute_force_nearest(self.points, q);
            }
            let reach = r as f64 * self.cell;
            // Unvisited cells are at least `reach` away; a small margin covers
            // rounding in the cell assignment.
            if best.1 < reach * reach * (1.0 - 1e-9) {
                break;
            }
        }
        best
    }

    /// Calls `f` for each cell at Chebyshev distance exactly `r` from `c`
    /// that intersects the occupied box, until `f` returns false. Returns
    /// whether the whole ring was visited.
    fn for_ring(&self, c: [i64; 3], r: i64, mut f: impl FnMut([i64; 3]) -> bool) -> bool {
        let range = |a: usize| ((c[a] - r).max(self.lo[a]), (c[a] + r).min(self.hi[a]));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            let on_x = (x - c[0]).abs() == r;
            for y in y0..=y1 {
                let on_y = (y - c[1]).abs() == r;
                if on_x || on_y {
                    for z in z0..=z1 {
                        if !f([x, y, z]) {
                            return false;
                        }
                    }
                } else {
                    let lo = c[2] - r;
                    let hi = c[2] + r;
                    if lo >= z0 && lo <= z1 && !f([x, y, lo]) {
                        return false;
                    }
                    if hi != lo && hi >= z0 && hi <= z1 && !f([x, y, hi]) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn estimate_cell_size(points: &[Point3], lo: &Point3, hi: &Point3) -> f64 {
    let n = points.len();
    let stride = (n / 32).max(1);
    let mut nn: Vec<f64> = Vec::new();
    for i in (0..n).step_by(stride) {
        let mut best = f64::INFINITY;
        for (j, p) in points.iter().enumerate() {
            if j != i {
                best = best.min(dist2(p, &points[i]));
            }
        }
        if best.is_finite() && best > 0.0 {
            nn.push(best.sqrt());
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0f64, f64::max);
    // Keep the grid at most ~256 cells along its longest side.
    let floor = (extent / 256.0).max(1e-12);
    if nn.is_empty() {
        return (extent / (n as f64).cbrt()).max(floor);
    }
    nn.sort_by(f64::total_cmp);
    nn[nn.len() / 2].max(floor)
}

/// 75th-percentile distance from about 32 evenly strided queries to their nearest
/// target; 0 without queries.
fn query_offset(points: &[Point3], queries: &[Point3]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let stride = (queries.len() / 32).max(1);
    let mut d: Vec<f64> = queries
        .iter()
        .step_by(stride)
        .map(|q| brute_force_nearest(points, q).1.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() * 3 / 4]
}

/// Nearest target for every query, choosing brute force or the grid by size.
/// `targets` must be non-empty.
pub fn nearest_neighbors(queries: &[Point3], targets: &[Point3]) -> Vec<(usize, f64)> {
    if targets.len() < BRUTE_FORCE_LIMIT || queries.len() < BRUTE_FORCE_LIMIT {
        queries.iter().map(|q| brute_force_nearest(targets, q)).collect()
    } else {
        let grid = PointGrid::build_for(targets, queries);
        queries.iter().map(|q| grid.nearest(q)).collect()
    }
}
