//! Point clouds and the geometric primitives built on them.

mod grid;
mod knn;
mod sampling;
mod shapes;

pub use grid::SpatialGrid;
pub use knn::{knn, NeighborTable};
pub use sampling::{farthest_point_sample, min_pairwise_distance, poisson_disk_sample, PdsResult};
pub use shapes::{synth_shape, ShapeFamily, ShapeSpec};

use serde::{Deserialize, Serialize};
use vrckit_tensor::Tensor;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    File,
}

/// Ordered, nonempty list of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    category: Option<String>,
    source: Source,
    normalized: bool,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(PointCloud {
            points,
            category: None,
            source: Source::Synthetic,
            normalized: false,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        PointCloud::new(t.to_points()?)
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn category(&self) -> Option<&str> {
        self.category.as_deref()
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    /// Subset by index, keeping metadata. The result is no longer flagged
    /// as normalized.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points.get(i).copied().ok_or(Error::TooFewPoints {
                    requested: i + 1,
                    available: self.points.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = PointCloud::new(pts)?;
        out.category = self.category.clone();
        out.source = self.source;
        Ok(out)
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / n)
    }

    /// Applies `p ↦ (p − offset) / scale` to every point.
    pub fn transformed(&self, t: &NormalizeTransform) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|d| (p[d] - t.centroid[d]) / t.scale))
            .collect();
        PointCloud {
            points,
            category: self.category.clone(),
            source: self.source,
            normalized: false,
        }
    }
}

/// Centroid and scale removed by [`normalize_unit_sphere`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub centroid: Point,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn identity() -> Self {
        NormalizeTransform {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Maps a normalized cloud back into the original frame.
    pub fn inverse(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|d| p[d] * self.scale + self.centroid[d]))
            .collect();
        PointCloud {
            points,
            category: cloud.category.clone(),
            source: cloud.source,
            normalized: false,
        }
    }
}

/// Centers a cloud on its centroid and scales it so the farthest point has
/// norm 1. A cloud whose points all coincide keeps scale 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> (PointCloud, NormalizeTransform) {
    let centroid = cloud.centroid();
    let max_norm = cloud
        .points
        .iter()
        .map(|p| norm(sub(*p, centroid)))
        .fold(0.0, f64::max);
    let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
    let t = NormalizeTransform { centroid, scale };
    let mut out = cloud.transformed(&t);
    out.normalized = true;
    (out, t)
}

/// Reflects every point across the plane through the origin with normal `n`.
pub fn mirror(cloud: &PointCloud, plane_normal: Point) -> Result<PointCloud> {
    let len = norm(plane_normal);
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mirror plane normal must be nonzero, got {plane_normal:?}"
        )));
    }
    // Unit input is used as given so that axis normals reflect bit-exactly.
    let n = if (len - 1.0).abs() < 1e-15 {
        plane_normal
    } else {
        plane_normal.map(|c| c / len)
    };
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let s = 2.0 * dot(*p, n);
            [p[0] - s * n[0], p[1] - s * n[1], p[2] - s * n[2]]
        })
        .collect();
    Ok(PointCloud {
        points,
        category: cloud.category.clone(),
        source: cloud.source,
        normalized: cloud.normalized,
    })
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Euclidean distance, summed in x, y, z order.
#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
