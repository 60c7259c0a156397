use super::{dist2, Point};
use crate::error::{Error, Result};

/// `rows × k` neighbor indices, each row sorted by ascending distance with
/// ties broken by the smaller index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborTable {
    pub fn from_flat(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            return Err(Error::InvalidArgument(format!(
                "neighbor table of width {k} cannot hold {} indices",
                indices.len()
            )));
        }
        Ok(NeighborTable { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    /// The first `k` columns. Because rows are sorted, this equals a fresh
    /// `knn` query with the smaller `k`.
    pub fn truncated(&self, k: usize) -> Result<NeighborTable> {
        if k == 0 || k > self.k {
            return Err(Error::KTooLarge { k, n: self.k });
        }
        if k == self.k {
            return Ok(self.clone());
        }
        let indices = self
            .indices
            .chunks_exact(self.k)
            .flat_map(|r| r[..k].iter().copied())
            .collect();
        Ok(NeighborTable { k, indices })
    }
}

/// Exhaustive k-nearest-neighbor search of `queries` against `cloud`.
pub fn knn(cloud: &[Point], queries: &[Point], k: usize) -> Result<NeighborTable> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k == 0 || k > cloud.len() {
        return Err(Error::KTooLarge { k, n: cloud.len() });
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(cloud.len());
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for q in queries {
        scratch.clear();
        scratch.extend(cloud.iter().enumerate().map(|(j, p)| (dist2(q, p), j)));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, order);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(order);
        indices.extend(scratch.iter().map(|e| e.1));
    }
    Ok(NeighborTable { k, indices })
}
