//! Point cloud geometry: sampling, neighborhoods, density, grouping.
//!
//! Index-producing operations (farthest point sampling, k-nearest
//! neighbors) follow canonical deterministic rules, so the selected
//! *points* do not depend on input order:
//!
//! * sampling starts from the lexicographically smallest `(x, y, z)`
//!   position (lowest index on exact duplicates);
//! * distance ties break by lexicographic position, then lowest index.

mod density;
mod group;
mod kdtree;
mod sample;

pub use density::{kde_density, DensityField};
pub use group::{group_features, interpolate_features};
pub use sample::{farthest_point_sample, knn, knn_points, NeighborhoodIndex};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A cloud of 3-D points with optional per-point attributes and labels.
#[derive(Debug, Clone)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    attributes: Option<Tensor>,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("PointCloud", "no points"));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("PointCloud", "non-finite coordinate"));
        }
        Ok(PointCloud {
            positions,
            attributes: None,
            labels: None,
        })
    }

    /// Attaches an `[n, a]` attribute matrix (colors, normals, ...).
    pub fn with_attributes(mut self, attributes: Tensor) -> Result<Self> {
        if attributes.rank() != 2 || attributes.shape()[0] != self.positions.len() {
            return Err(Error::shape(
                "PointCloud::with_attributes",
                format!(
                    "attributes {:?} for {} points",
                    attributes.shape(),
                    self.positions.len()
                ),
            ));
        }
        self.attributes = Some(attributes);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.positions.len() {
            return Err(Error::shape(
                "PointCloud::with_labels",
                format!("{} labels for {} points", labels.len(), self.positions.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i]
    }

    pub fn attributes(&self) -> Option<&Tensor> {
        self.attributes.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.positions {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        let n = self.positions.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Index of the point nearest to `target`, using the canonical
    /// distance/lexicographic/index tie rules.
    pub fn nearest_to(&self, target: [f64; 3]) -> usize {
        let mut best = 0;
        for i in 1..self.positions.len() {
            if cmp_candidates(
                dist2(self.positions[i], target),
                &self.positions[i],
                i,
                dist2(self.positions[best], target),
                &self.positions[best],
                best,
            )
            .is_lt()
            {
                best = i;
            }
        }
        best
    }

    /// Builds a sub-cloud from the given point indices, carrying
    /// attribute rows and labels along.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let positions: Vec<[f64; 3]> = indices.iter().map(|&i| self.positions[i]).collect();
        let mut cloud = PointCloud::new(positions)?;
        if let Some(attrs) = &self.attributes {
            let cols = attrs.shape()[1];
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                data.extend_from_slice(&attrs.data()[i * cols..(i + 1) * cols]);
            }
            cloud = cloud.with_attributes(Tensor::from_vec(&[indices.len(), cols], data)?)?;
        }
        if let Some(labels) = &self.labels {
            cloud = cloud.with_labels(indices.iter().map(|&i| labels[i]).collect())?;
        }
        Ok(cloud)
    }
}

/// Mean distance from each point to its nearest other point. Used as a
/// stand-in bandwidth for neighborhoods configured without one. A single
/// point has no neighbor; that degenerate case reports 1.
pub fn mean_nearest_neighbor_distance(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for (i, &p) in points.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, &q) in points.iter().enumerate() {
            if i != j {
                best = best.min(dist2(p, q));
            }
        }
        total += best.sqrt();
    }
    total / points.len() as f64
}

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Total order on neighbor candidates: distance, then lexicographic
/// position, then index. Every index-producing query uses this.
pub(crate) fn cmp_candidates(
    d2_a: f64,
    pos_a: &[f64; 3],
    idx_a: usize,
    d2_b: f64,
    pos_b: &[f64; 3],
    idx_b: usize,
) -> std::cmp::Ordering {
    d2_a.total_cmp(&d2_b)
        .then_with(|| pos_a[0].total_cmp(&pos_b[0]))
        .then_with(|| pos_a[1].total_cmp(&pos_b[1]))
        .then_with(|| pos_a[2].total_cmp(&pos_b[2]))
        .then_with(|| idx_a.cmp(&idx_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_rejects_bad_inputs() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        assert!(c.clone().with_labels(vec![1]).is_err());
        assert!(c.with_attributes(Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn centroid_and_nearest() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 3.0, 0.0]]).unwrap();
        let cen = c.centroid();
        assert_eq!(cen, [1.0, 1.0, 0.0]);
        assert_eq!(c.nearest_to([1.9, 0.1, 0.0]), 1);
    }

    #[test]
    fn nearest_breaks_ties_lexicographically() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        // both at distance 1 from origin; -1 < 1 lexicographically
        assert_eq!(c.nearest_to([0.0, 0.0, 0.0]), 1);
    }

    #[test]
    fn mean_nn_distance_on_unit_segment() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        // nearest-other distances: 1, 1, 2
        let d = mean_nearest_neighbor_distance(&pts);
        assert!((d - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(mean_nearest_neighbor_distance(&pts[..1]), 1.0);
    }

    #[test]
    fn select_carries_attributes_and_labels() {
        let attrs = Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]])
            .unwrap()
            .with_attributes(attrs)
            .unwrap()
            .with_labels(vec![7, 8, 9])
            .unwrap();
        let s = c.select(&[2, 0]).unwrap();
        assert_eq!(s.positions(), &[[2.0; 3], [0.0; 3]]);
        assert_eq!(s.attributes().unwrap().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(s.labels().unwrap(), &[9, 7]);
    }
}
