//! Farthest point sampling and k-nearest-neighbor queries.

use super::kdtree::KdTree;
use super::{cmp_candidates, dist2, PointCloud};
use crate::error::{Error, Result};

/// Neighbor lists for a batch of queries: `n_queries` rows of `k` point
/// indices each, nearest first.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    k: usize,
    n_queries: usize,
    neighbors: Vec<usize>,
}

impl NeighborhoodIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    /// Neighbor indices of query `q`, nearest first.
    pub fn row(&self, q: usize) -> &[usize] {
        &self.neighbors[q * self.k..(q + 1) * self.k]
    }

    /// All rows, flattened row-major.
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }
}

/// Greedy farthest point sampling.
///
/// Starts from the lexicographically smallest `(x, y, z)` position
/// (lowest index among exact duplicates); each subsequent pick maximizes
/// the minimum distance to everything already selected, with the
/// distance/lexicographic/index rule breaking ties. The canonical start
/// and tie rules make the selected point sequence independent of input
/// order.
///
/// Returns selection order. `n_samples` must satisfy
/// `1 <= n_samples <= cloud.len()`.
pub fn farthest_point_sample(cloud: &PointCloud, n_samples: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n_samples == 0 || n_samples > n {
        return Err(Error::invalid(
            "farthest_point_sample",
            format!("n_samples {} outside 1..={}", n_samples, n),
        ));
    }
    let points = cloud.positions();

    let mut start = 0;
    for i in 1..n {
        if cmp_candidates(0.0, &points[i], i, 0.0, &points[start], start).is_lt() {
            start = i;
        }
    }

    let mut selected = Vec::with_capacity(n_samples);
    selected.push(start);
    let mut min_d2: Vec<f64> = points.iter().map(|&p| dist2(p, points[start])).collect();

    while selected.len() < n_samples {
        let mut best = 0;
        for i in 1..n {
            // maximize distance: flip the comparison on d2, keep the
            // position/index order for ties
            let lt = min_d2[i]
                .total_cmp(&min_d2[best])
                .reverse()
                .then_with(|| cmp_candidates(0.0, &points[i], i, 0.0, &points[best], best))
                .is_lt();
            if lt {
                best = i;
            }
        }
        selected.push(best);
        for i in 0..n {
            let d = dist2(points[i], points[best]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(selected)
}

/// k nearest cloud points for each query position; a query that is
/// itself a cloud point counts as its own neighbor at distance zero.
///
/// When the cloud has fewer than `k` points, each row lists all of them
/// (nearest first) and pads the remainder by repeating the nearest.
pub fn knn(cloud: &PointCloud, queries: &[[f64; 3]], k: usize) -> Result<NeighborhoodIndex> {
    knn_points(cloud.positions(), queries, k)
}

/// [`knn`] over a bare position slice.
pub fn knn_points(points: &[[f64; 3]], queries: &[[f64; 3]], k: usize) -> Result<NeighborhoodIndex> {
    if k == 0 {
        return Err(Error::invalid("knn", "k must be at least 1"));
    }
    if points.is_empty() {
        return Err(Error::invalid("knn", "empty point set"));
    }
    if queries.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("knn", "non-finite query coordinate"));
    }
    let tree = KdTree::build(points);
    let effective_k = k.min(points.len());
    let mut neighbors = Vec::with_capacity(queries.len() * k);
    for &q in queries {
        let row = tree.knn(q, effective_k);
        let nearest = row[0];
        neighbors.extend_from_slice(&row);
        neighbors.extend(std::iter::repeat_n(nearest, k - effective_k));
    }
    Ok(NeighborhoodIndex {
        k,
        n_queries: queries.len(),
        neighbors,
    })
}
