use std::collections::HashMap;

use super::{dist2, Point};

type Cell = (i64, i64, i64);

/// Uniform hash grid for fixed-radius queries.
#[derive(Debug)]
pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl SpatialGrid {
    pub fn new(points: &[Point], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for k in cells.keys() {
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
        }
        SpatialGrid {
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn key(p: &Point, cell: f64) -> Cell {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Calls `f(j, d²)` for every point `j` with `‖p − points[j]‖ ≤ radius`,
    /// in ascending index order.
    pub fn for_each_within(
        &self,
        points: &[Point],
        p: &Point,
        radius: f64,
        mut f: impl FnMut(usize, f64),
    ) {
        let r2 = radius * radius;
        let mut hits = Vec::new();
        self.visit(p, radius, |j| {
            let d = dist2(p, &points[j]);
            if d <= r2 {
                hits.push((j, d));
            }
        });
        hits.sort_unstable_by_key(|h| h.0);
        for (j, d) in hits {
            f(j, d);
        }
    }

    fn visit(&self, p: &Point, radius: f64, mut f: impl FnMut(usize)) {
        let span = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = Self::key(p, self.cell);
        for x in cx - span..=cx + span {
            for y in cy - span..=cy + span {
                for z in cz - span..=cz + span {
                    if let Some(ids) = self.cells.get(&(x, y, z)) {
                        ids.iter().for_each(|&j| f(j));
                    }
                }
            }
        }
    }

    /// Squared distance from `points[i]` to its nearest other point among
    /// those accepted by `alive`, searching outward ring by ring.
    pub fn nearest_other_dist2(
        &self,
        points: &[Point],
        i: usize,
        alive: impl Fn(usize) -> bool,
    ) -> Option<f64> {
        let p = &points[i];
        let mut best = f64::INFINITY;
        let (cx, cy, cz) = Self::key(p, self.cell);
        let max_ring = [
            cx - self.lo.0,
            self.hi.0 - cx,
            cy - self.lo.1,
            self.hi.1 - cy,
            cz - self.lo.2,
            self.hi.2 - cz,
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
        .max(0);
        for ring in 0..=max_ring {
            // Any point in ring r is at least (r − 1)·cell away.
            let lower = (ring as f64 - 1.0).max(0.0) * self.cell;
            if best.is_finite() && lower * lower > best {
                break;
            }
            for x in cx - ring..=cx + ring {
                for y in cy - ring..=cy + ring {
                    for z in cz - ring..=cz + ring {
                        let on_shell = (x - cx).abs() == ring
                            || (y - cy).abs() == ring
                            || (z - cz).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&(x, y, z)) {
                            for &j in ids {
                                if j != i && alive(j) {
                                    best = best.min(dist2(p, &points[j]));
                                }
                            }
                        }
                    }
                }
            }
        }
        best.is_finite().then_some(best)
    }
}
