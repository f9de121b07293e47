//! Deterministic point-set kernels.
//!
//! Everything in this module is a pure function over immutable inputs: given
//! the same cloud and seed it produces the same bits, on every thread count.

mod mesh;
mod sampling;

pub mod io;

pub use io::{read_off, read_xyz, write_xyz};
pub use mesh::{sample_mesh_surface, TriangleMesh};
pub use sampling::{farthest_point_sample, knn_group, knn_group_brute, RegionPyramid};

use crate::error::{Error, Result};
use crate::parallel;

/// An ordered list of 3D points with an opaque identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub id: String,
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            id: id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|c| c.is_finite()))
    }
}

#[inline]
pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Center a cloud on its centroid and scale it into the unit ball.
///
/// The degenerate all-coincident cloud maps to all zeros. Errors on an empty
/// cloud or non-finite coordinates.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot normalize an empty cloud"));
    }
    if !cloud.is_finite() {
        return Err(Error::invalid(format!(
            "cloud {:?} has non-finite coordinates",
            cloud.id
        )));
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &cloud.points {
        centroid[0] += p[0];
        centroid[1] += p[1];
        centroid[2] += p[2];
    }
    centroid[0] /= n;
    centroid[1] /= n;
    centroid[2] /= n;

    let mut centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| dist2(*p, [0.0; 3]).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm > 0.0 {
        for p in &mut centered {
            p[0] /= max_norm;
            p[1] /= max_norm;
            p[2] /= max_norm;
        }
    } else {
        for p in &mut centered {
            *p = [0.0; 3];
        }
    }
    Ok(PointCloud::new(cloud.id.clone(), centered))
}

/// Symmetric mean nearest-neighbor distance between two point sets, with the
/// unsquared Euclidean norm in both directions.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Chamfer distance needs non-empty clouds"));
    }
    Ok(chamfer_points(&a.points, &b.points))
}

/// Chamfer distance on raw point slices; both slices must be non-empty.
pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    directed_mean_min(a, b) + directed_mean_min(b, a)
}

fn directed_mean_min(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mins = parallel::map_slice(from, |p| {
        let mut best = f64::INFINITY;
        for q in to {
            let d = dist2(*p, *q);
            if d < best {
                best = d;
            }
        }
        best.sqrt()
    });
    let sum: f64 = mins.iter().sum();
    sum / from.len() as f64
}
