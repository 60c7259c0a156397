use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::grid::SpatialGrid;
use super::{dist2, Point};
use crate::error::{Error, Result};

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each pick maximizes the squared distance to the already selected set,
/// ties going to the smaller index.
pub fn farthest_point_sample(points: &[Point], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if m == 0 || m > n {
        return Err(Error::TooFewPoints {
            requested: m,
            available: n,
        });
    }
    if seed_index >= n {
        return Err(Error::InvalidArgument(format!(
            "FPS seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut picked = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = seed_index;
    for _ in 0..m {
        picked.push(cur);
        best[cur] = -1.0;
        let c = points[cur];
        let mut arg = usize::MAX;
        let mut arg_d = f64::NEG_INFINITY;
        for (j, p) in points.iter().enumerate() {
            if best[j] < 0.0 {
                continue;
            }
            let d = dist2(&c, p);
            if d < best[j] {
                best[j] = d;
            }
            if best[j] > arg_d {
                arg_d = best[j];
                arg = j;
            }
        }
        cur = arg;
    }
    Ok(picked)
}

/// Smallest distance between two distinct entries of `points`
/// (infinite for fewer than two points).
pub fn min_pairwise_distance(points: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(dist2(&points[i], &points[j]));
        }
    }
    best.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdsResult {
    /// Surviving indices into the dense input, ascending.
    pub indices: Vec<usize>,
    pub r_final: f64,
}

const WSE_ALPHA: i32 = 8;

#[derive(PartialEq)]
struct HeapEntry {
    weight: f64,
    index: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Poisson disk subset of a dense surface sample via weighted sample
/// elimination.
///
/// The surface area is estimated from the dense cloud's mean
/// nearest-neighbor spacing. Points are removed one at a time, always the
/// one with the largest accumulated neighbor weight (ties to the smaller
/// index), until `target_n` remain.
pub fn poisson_disk_sample(points: &[Point], target_n: usize) -> Result<PdsResult> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if target_n == 0 || target_n > n {
        return Err(Error::TooFewPoints {
            requested: target_n,
            available: n,
        });
    }
    if target_n == n {
        let indices: Vec<usize> = (0..n).collect();
        return Ok(PdsResult {
            indices,
            r_final: min_pairwise_distance(points),
        });
    }

    let extent = bbox_extent(points);
    let probe_cell = (extent / (n as f64).sqrt()).max(1e-12);
    let probe = SpatialGrid::new(points, probe_cell);
    let mean_nn = (0..n)
        .map(|i| {
            probe
                .nearest_other_dist2(points, i, |_| true)
                .unwrap_or(0.0)
                .sqrt()
        })
        .sum::<f64>()
        / n as f64;
    // Mean nearest-neighbor spacing of a uniform planar process is ½·√(A/N).
    let area = n as f64 * (2.0 * mean_nn).powi(2);
    let mut r_max = (area / (2.0 * 3f64.sqrt() * target_n as f64)).sqrt();
    if !(r_max > 0.0) {
        r_max = extent.max(1.0);
    }
    let reach = 2.0 * r_max;
    let grid = SpatialGrid::new(points, reach);

    let mut neighbors: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut weight = vec![0.0; n];
    for i in 0..n {
        let mut list = Vec::new();
        grid.for_each_within(points, &points[i], reach, |j, d2| {
            if j != i {
                let w = (1.0 - d2.sqrt() / reach).max(0.0).powi(WSE_ALPHA);
                list.push((j, w));
            }
        });
        weight[i] = list.iter().map(|e| e.1).sum();
        neighbors.push(list);
    }

    let mut alive = vec![true; n];
    let mut heap: BinaryHeap<HeapEntry> = (0..n)
        .map(|i| HeapEntry {
            weight: weight[i],
            index: i,
        })
        .collect();
    let mut remaining = n;
    while remaining > target_n {
        let Some(top) = heap.pop() else { break };
        let i = top.index;
        if !alive[i] || top.weight.to_bits() != weight[i].to_bits() {
            continue;
        }
        alive[i] = false;
        remaining -= 1;
        for &(j, w) in &neighbors[i] {
            if alive[j] {
                weight[j] -= w;
                heap.push(HeapEntry {
                    weight: weight[j],
                    index: j,
                });
            }
        }
    }

    let indices: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let kept: Vec<Point> = indices.iter().map(|&i| points[i]).collect();
    Ok(PdsResult {
        indices,
        r_final: min_pairwise_distance(&kept),
    })
}

fn bbox_extent(points: &[Point]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max)
}
