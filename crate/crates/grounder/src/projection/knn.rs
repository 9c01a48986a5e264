//! Exact nearest-neighbor queries over a uniform spatial hash grid.
//!
//! Points are binned into cubic cells; queries expand outward ring by ring
//! (cells at growing Chebyshev radius) and stop once no unvisited cell can
//! hold a closer point. Results are exact — the grid only accelerates the
//! search — and ties are broken by ascending point index so queries are
//! deterministic regardless of cell size.

use std::collections::HashMap;

use nalgebra::Point3;

/// Spatial hash over a borrowed point slice.
pub struct PointGrid<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    lo: (i64, i64, i64),
    hi: (i64, i64, i64),
}

/// Cell edge aimed at a few points per cell: bounding-box diagonal divided by
/// the cube root of the point count, with a fallback for degenerate clouds.
fn auto_cell(points: &[Point3<f64>]) -> f64 {
    let first = match points.first() {
        Some(p) => p,
        None => return 1.0,
    };
    let mut min = *first;
    let mut max = *first;
    for p in points {
        for i in 0..3 {
            min[i] = min[i].min(p[i]);
            max[i] = max[i].max(p[i]);
        }
    }
    let diag = (max - min).norm();
    let cell = diag / (points.len() as f64).cbrt();
    if cell.is_finite() && cell > 0.0 {
        cell
    } else {
        1.0
    }
}

impl<'a> PointGrid<'a> {
    pub fn build(points: &'a [Point3<f64>]) -> PointGrid<'a> {
        Self::with_cell(points, auto_cell(points))
    }

    pub fn with_cell(points: &'a [Point3<f64>], cell: f64) -> PointGrid<'a> {
        assert!(cell.is_finite() && cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let key = Self::key_for(p, cell);
            lo = (lo.0.min(key.0), lo.1.min(key.1), lo.2.min(key.2));
            hi = (hi.0.max(key.0), hi.1.max(key.1), hi.2.max(key.2));
            cells.entry(key).or_default().push(i as u32);
        }
        PointGrid {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn key_for(p: &Point3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point to `query` (ties by lowest
    /// index), skipping `exclude` if given. `None` only for an empty grid.
    pub fn nearest_excluding(
        &self,
        query: &Point3<f64>,
        exclude: Option<usize>,
    ) -> Option<(usize, f64)> {
        self.k_nearest_excluding(query, 1, exclude)
            .into_iter()
            .next()
    }

    pub fn nearest(&self, query: &Point3<f64>) -> Option<(usize, f64)> {
        self.nearest_excluding(query, None)
    }

    /// The `k` nearest points to `query` ordered by `(distance, index)`,
    /// skipping `exclude` if given. Returns fewer than `k` entries only when
    /// the grid holds fewer eligible points.
    pub fn k_nearest_excluding(
        &self,
        query: &Point3<f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let eligible =
            self.points.len() - usize::from(exclude.is_some() && !self.points.is_empty());
        let k = k.min(eligible);
        if k == 0 {
            return Vec::new();
        }
        let qc = Self::key_for(query, self.cell);
        // Rings closer than this cannot intersect the occupied bounding box.
        let first_ring = [
            self.lo.0 - qc.0,
            self.lo.1 - qc.1,
            self.lo.2 - qc.2,
            qc.0 - self.hi.0,
            qc.1 - self.hi.1,
            qc.2 - self.hi.2,
        ]
        .into_iter()
        .max()
        .expect("non-empty")
        .max(0);
        // Beyond this radius every occupied cell has been visited.
        let max_ring = [
            (qc.0 - self.lo.0).abs(),
            (qc.1 - self.lo.1).abs(),
            (qc.2 - self.lo.2).abs(),
            (qc.0 - self.hi.0).abs(),
            (qc.1 - self.hi.1).abs(),
            (qc.2 - self.hi.2).abs(),
        ]
        .into_iter()
        .max()
        .expect("non-empty");

        // Sorted by (distance, index); at most k entries.
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let consider = |idx: usize, best: &mut Vec<(usize, f64)>| {
            if Some(idx) == exclude {
                return;
            }
            let d = (self.points[idx] - query).norm();
            let pos = best
                .binary_search_by(|&(bi, bd)| {
                    bd.partial_cmp(&d)
                        .expect("finite distances")
                        .then(bi.cmp(&idx))
                })
                .unwrap_err();
            if pos < k {
                best.insert(pos, (idx, d));
                best.truncate(k);
            }
        };

        // After this many rings the search degenerates (huge kth distance
        // relative to the cell size); one exhaustive sweep of the remaining
        // occupied cells is then cheaper and still exact.
        const FALLBACK_RINGS: i64 = 32;

        for r in first_ring..=max_ring {
            // A point in an unvisited cell (Chebyshev radius >= r) lies at
            // least (r - 1) * cell away, so once the kth best is strictly
            // closer the search is complete.
            if best.len() == k && best[k - 1].1 < (r as f64 - 1.0) * self.cell {
                break;
            }
            if r - first_ring >= FALLBACK_RINGS {
                for (key, indices) in &self.cells {
                    let cheb = (key.0 - qc.0)
                        .abs()
                        .max((key.1 - qc.1).abs())
                        .max((key.2 - qc.2).abs());
                    if cheb >= r {
                        for &i in indices {
                            consider(i as usize, &mut best);
                        }
                    }
                }
                break;
            }
            self.for_ring_cells(qc, r, |cell_key| {
                if let Some(indices) = self.cells.get(&cell_key) {
                    for &i in indices {
                        consider(i as usize, &mut best);
                    }
                }
            });
        }
        best
    }

    /// Visits every cell at exactly Chebyshev radius `r` from `center` that
    /// lies inside the occupied bounding box: the two x-faces of the ring
    /// cube, then the y- and z-faces shrunk to exclude cells already covered.
    fn for_ring_cells(&self, center: (i64, i64, i64), r: i64, mut f: impl FnMut((i64, i64, i64))) {
        if r == 0 {
            f(center);
            return;
        }
        let (cx, cy, cz) = center;
        let (lo, hi) = (self.lo, self.hi);
        let y_full = ((cy - r).max(lo.1), (cy + r).min(hi.1));
        let z_full = ((cz - r).max(lo.2), (cz + r).min(hi.2));
        let x_inner = ((cx - r + 1).max(lo.0), (cx + r - 1).min(hi.0));
        let y_inner = ((cy - r + 1).max(lo.1), (cy + r - 1).min(hi.1));

        for x in [cx - r, cx + r] {
            if x < lo.0 || x > hi.0 {
                continue;
            }
            for y in y_full.0..=y_full.1 {
                for z in z_full.0..=z_full.1 {
                    f((x, y, z));
                }
            }
        }
        for y in [cy - r, cy + r] {
            if y < lo.1 || y > hi.1 {
                continue;
            }
            for x in x_inner.0..=x_inner.1 {
                for z in z_full.0..=z_full.1 {
                    f((x, y, z));
                }
            }
        }
        for z in [cz - r, cz + r] {
            if z < lo.2 || z > hi.2 {
                continue;
            }
            for x in x_inner.0..=x_inner.1 {
                for y in y_inner.0..=y_inner.1 {
                    f((x, y, z));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_k_nearest(
        points: &[Point3<f64>],
        query: &Point3<f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, p)| (i, (p - query).norm()))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let n = rng.gen_range(1..=120);
            let spread = if case % 2 == 0 { 1.0 } else { 50.0 };
            let points: Vec<Point3<f64>> = (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-spread..spread),
                        rng.gen_range(-spread..spread),
                        rng.gen_range(-spread..spread),
                    )
                })
                .collect();
            let grid = PointGrid::build(&points);
            for _ in 0..20 {
                let q = Point3::new(
                    rng.gen_range(-2.0 * spread..2.0 * spread),
                    rng.gen_range(-2.0 * spread..2.0 * spread),
                    rng.gen_range(-2.0 * spread..2.0 * spread),
                );
                let k = rng.gen_range(1..=8);
                let exclude = if rng.gen_bool(0.5) {
                    Some(rng.gen_range(0..n))
                } else {
                    None
                };
                let got = grid.k_nearest_excluding(&q, k, exclude);
                let want = brute_k_nearest(&points, &q, k, exclude);
                assert_eq!(got, want, "n={n} k={k} exclude={exclude:?}");
            }
        }
    }

    #[test]
    fn exact_even_with_adversarial_cell_sizes() {
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.09, 0.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(10.0, 10.0, 10.0),
        ];
        for cell in [0.05, 0.1, 1.0, 100.0] {
            let grid = PointGrid::with_cell(&points, cell);
            let q = Point3::new(0.1, 0.0, 0.0);
            assert_eq!(grid.nearest(&q).unwrap().0, 1, "cell={cell}");
            let all = grid.k_nearest_excluding(&q, 4, None);
            assert_eq!(
                all.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
                vec![1, 0, 2, 3],
                "cell={cell}"
            );
        }
    }

    #[test]
    fn ties_break_by_lowest_index() {
        // Two points equidistant from the query.
        let points = vec![Point3::new(1.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0)];
        let grid = PointGrid::build(&points);
        assert_eq!(grid.nearest(&Point3::origin()).unwrap().0, 0);
        // Duplicate points: all distances tie.
        let dup = vec![Point3::new(2.0, 2.0, 2.0); 5];
        let grid = PointGrid::build(&dup);
        let got = grid.k_nearest_excluding(&Point3::origin(), 3, Some(0));
        assert_eq!(
            got.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn empty_and_exclusion_edge_cases() {
        let none: Vec<Point3<f64>> = Vec::new();
        assert!(PointGrid::build(&none).nearest(&Point3::origin()).is_none());
        let one = vec![Point3::new(1.0, 2.0, 3.0)];
        let grid = PointGrid::build(&one);
        assert!(grid.nearest_excluding(&Point3::origin(), Some(0)).is_none());
        assert_eq!(
            grid.k_nearest_excluding(&Point3::origin(), 5, None).len(),
            1
        );
    }
}
