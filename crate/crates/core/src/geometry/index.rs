//! Uniform-grid spatial index with exact radius and k-nearest queries.

use super::{dist2, Point3};

/// Points bucketed into a dense grid of cubic cells (CSR layout).
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    cell_start: Vec<u32>,
    ids: Vec<u32>,
}

/// Upper bound on cells relative to point count; coarser cells are used when
/// the requested size would exceed it.
const MAX_CELLS_PER_POINT: usize = 8;

impl SpatialIndex {
    /// Builds with cells of (at least) `cell_size`.
    pub fn build(points: Vec<Point3>, cell_size: f64) -> Self {
        assert!(cell_size > 0.0 && cell_size.is_finite(), "cell size must be positive");
        let (lo, hi) = bounds(&points);
        let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let mut cell = cell_size;
        let budget = (points.len() * MAX_CELLS_PER_POINT).max(64);
        let mut dims;
        loop {
            dims = [0usize; 3];
            for a in 0..3 {
                dims[a] = ((extent[a] / cell).floor() as usize + 1).max(1);
            }
            if dims.iter().product::<usize>() <= budget {
                break;
            }
            cell *= 1.5;
        }
        let ncell = dims.iter().product::<usize>();
        let mut index = Self {
            points,
            origin: lo,
            cell,
            dims,
            cell_start: vec![0; ncell + 1],
            ids: Vec::new(),
        };
        let keys: Vec<usize> = index
            .points
            .iter()
            .map(|p| index.flat(index.cell_of(p)))
            .collect();
        for &k in &keys {
            index.cell_start[k + 1] += 1;
        }
        for c in 0..ncell {
            index.cell_start[c + 1] += index.cell_start[c];
        }
        let mut fill = index.cell_start.clone();
        index.ids = vec![0; index.points.len()];
        for (i, &k) in keys.iter().enumerate() {
            index.ids[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        index
    }

    /// Builds with a cell size from the mean point spacing, scaled so a cell
    /// holds roughly `per_cell` points.
    pub fn build_for_knn(points: Vec<Point3>, per_cell: usize) -> Self {
        let n = points.len().max(1);
        let (lo, hi) = bounds(&points);
        // Thin clouds (a floor) are effectively 2D; use the two largest axes.
        let mut ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        ext.sort_by(|a, b| b.total_cmp(a));
        let area = (ext[0].max(1e-6)) * (ext[1].max(1e-6));
        let vol = area * ext[2];
        let spacing3 = (vol / n as f64).cbrt();
        let spacing2 = (area / n as f64).sqrt();
        let spacing = if ext[2] < spacing2 { spacing2 } else { spacing3 };
        let cell = if ext[2] < spacing2 {
            spacing * (per_cell as f64).sqrt()
        } else {
            spacing * (per_cell as f64).cbrt()
        };
        Self::build(points, cell.max(1e-6))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn cell_of(&self, p: &Point3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let x = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = if x.is_nan() || x < 0.0 {
                0
            } else {
                (x as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn bucket(&self, c: [usize; 3]) -> &[u32] {
        let k = self.flat(c);
        &self.ids[self.cell_start[k] as usize..self.cell_start[k + 1] as usize]
    }

    /// Visits the cells of the box `[lo, hi]` (inclusive, clamped) that lie on
    /// its surface when `shell_only`.
    fn visit_box(&self, lo: [i64; 3], hi: [i64; 3], shell: Option<([i64; 3], [i64; 3])>, mut f: impl FnMut(&[u32])) {
        let cl = |a: usize, v: i64| v.clamp(0, self.dims[a] as i64 - 1);
        let (x0, x1) = (cl(0, lo[0]), cl(0, hi[0]));
        let (y0, y1) = (cl(1, lo[1]), cl(1, hi[1]));
        let (z0, z1) = (cl(2, lo[2]), cl(2, hi[2]));
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if let Some((ilo, ihi)) = shell {
                        // Skip cells strictly inside the already searched box.
                        if x >= ilo[0] && x <= ihi[0] && y >= ilo[1] && y <= ihi[1] && z >= ilo[2] && z <= ihi[2] {
                            continue;
                        }
                    }
                    f(self.bucket([x as usize, y as usize, z as usize]));
                }
            }
        }
    }

    /// Ids of all points within `r` of `query`, nearest first (ties by id).
    /// With `cap`, only the nearest `cap` are kept.
    pub fn radius_neighbors(&self, query: &Point3, r: f64, cap: Option<usize>) -> Vec<usize> {
        let mut hits = self.radius_with_dist(query, r);
        if let Some(c) = cap {
            hits.truncate(c);
        }
        hits.into_iter().map(|(_, i)| i).collect()
    }

    fn radius_with_dist(&self, query: &Point3, r: f64) -> Vec<(f64, usize)> {
        let mut hits = Vec::new();
        if self.points.is_empty() || !(r > 0.0) {
            return hits;
        }
        let r2 = r * r;
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for a in 0..3 {
            lo[a] = ((query[a] - r - self.origin[a]) / self.cell).floor() as i64;
            hi[a] = ((query[a] + r - self.origin[a]) / self.cell).floor() as i64;
            if hi[a] < 0 || lo[a] >= self.dims[a] as i64 {
                return hits;
            }
        }
        self.visit_box(lo, hi, None, |bucket| {
            for &id in bucket {
                let d = dist2(&self.points[id as usize], query);
                if d <= r2 {
                    hits.push((d, id as usize));
                }
            }
        });
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits
    }

    /// The `k` nearest points to `query`, nearest first (ties by id). Exact.
    pub fn knn(&self, query: &Point3, k: usize) -> Vec<usize> {
        self.knn_with_dist2(query, k).into_iter().map(|(_, i)| i).collect()
    }

    /// Like [`knn`](Self::knn) but also returns squared distances.
    pub fn knn_with_dist2(&self, query: &Point3, k: usize) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if self.points.is_empty() || k == 0 {
            return best;
        }
        let c = self.cell_of(query);
        let c = [c[0] as i64, c[1] as i64, c[2] as i64];
        let max_shell = self.dims.iter().max().copied().unwrap_or(1) as i64;
        let push = |d: f64, id: usize, best: &mut Vec<(f64, usize)>| {
            if best.len() == k {
                let last = best[k - 1];
                if d > last.0 || (d == last.0 && id > last.1) {
                    return;
                }
                best.pop();
            }
            let pos = best.partition_point(|e| e.0 < d || (e.0 == d && e.1 < id));
            best.insert(pos, (d, id));
        };
        let mut prev: Option<([i64; 3], [i64; 3])> = None;
        for s in 0..=max_shell {
            let lo = [c[0] - s, c[1] - s, c[2] - s];
            let hi = [c[0] + s, c[1] + s, c[2] + s];
            self.visit_box(lo, hi, prev, |bucket| {
                for &id in bucket {
                    let d = dist2(&self.points[id as usize], query);
                    push(d, id as usize, &mut best);
                }
            });
            prev = Some((lo, hi));
            if best.len() == k {
                // Distance from the query to the nearest cell not yet searched.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    if lo[a] > 0 {
                        let face = self.origin[a] + lo[a] as f64 * self.cell;
                        bound = bound.min((query[a] - face).max(0.0));
                    }
                    if hi[a] < self.dims[a] as i64 - 1 {
                        let face = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                        bound = bound.min((face - query[a]).max(0.0));
                    }
                }
                if best[k - 1].0 <= bound * bound {
                    break;
                }
            }
            let covers = (0..3).all(|a| lo[a] <= 0 && hi[a] >= self.dims[a] as i64 - 1);
            if covers {
                break;
            }
        }
        best
    }
}

fn bounds(points: &[Point3]) -> (Point3, Point3) {
    if points.is_empty() {
        return ([0.0; 3], [0.0; 3]);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_and_empty() {
        let idx = SpatialIndex::build(vec![[0.5, 0.5, 0.5]], 0.1);
        assert_eq!(idx.knn(&[3.0, -2.0, 9.0], 1), vec![0]);
        let empty = SpatialIndex::build(vec![], 0.1);
        assert!(empty.knn(&[0.0; 3], 4).is_empty());
        assert!(empty.radius_neighbors(&[0.0; 3], 1.0, None).is_empty());
    }

    #[test]
    fn unit_lattice_radius_query() {
        let mut pts = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let idx = SpatialIndex::build(pts.clone(), 1.1);
        let hits = idx.radius_neighbors(&[2.0, 2.0, 2.0], 1.1, None);
        assert_eq!(hits.len(), 7);
        assert_eq!(pts[hits[0]], [2.0, 2.0, 2.0]);
        let tight = idx.radius_neighbors(&[2.0, 2.0, 2.0], 0.5, None);
        assert_eq!(tight.len(), 1);
        let capped = idx.radius_neighbors(&[2.0, 2.0, 2.0], 1.1, Some(2));
        assert_eq!(capped.len(), 2);
        assert_eq!(capped[0], hits[0]);
    }

    #[test]
    fn coincident_query_comes_first() {
        let pts = vec![[0.0, 0.0, 0.0], [0.3, 0.1, 0.0], [0.2, 0.2, 0.2]];
        let idx = SpatialIndex::build(pts, 0.05);
        let r = idx.knn_with_dist2(&[0.3, 0.1, 0.0], 3);
        assert_eq!(r[0], (0.0, 1));
    }
}
