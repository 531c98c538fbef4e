//! Gaussian kernel density estimates over neighborhoods.

use super::sample::NeighborhoodIndex;
use super::PointCloud;
use crate::error::{Error, Result};

/// Per-point density values together with the bandwidth that produced
/// them.
#[derive(Debug, Clone)]
pub struct DensityField {
    values: Vec<f64>,
    sigma: f64,
}

impl DensityField {
    /// Wraps externally computed density values (one per point).
    pub fn from_values(values: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(
                "density",
                format!("bandwidth must be positive and finite, got {}", sigma),
            ));
        }
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("density", "values must be nonempty and finite"));
        }
        Ok(DensityField { values, sigma })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Kernel density at each query: the mean isotropic Gaussian response of
/// its neighbors, divided by the bandwidth,
///
/// ```text
/// d_q = 1/(K sigma) * sum_j (2 pi)^(-3/2) * exp(-|p_j - p_q|^2 / (2 sigma^2))
/// ```
///
/// where `j` runs over the `K` neighbors listed for `q`. Scaling all
/// positions and the bandwidth by a common factor `s` divides every
/// density by `s`.
pub fn kde_density(
    cloud: &PointCloud,
    queries: &[[f64; 3]],
    neighborhoods: &NeighborhoodIndex,
    sigma: f64,
) -> Result<DensityField> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(
            "kde_density",
            format!("bandwidth must be positive and finite, got {}", sigma),
        ));
    }
    if neighborhoods.n_queries() != queries.len() {
        return Err(Error::shape(
            "kde_density",
            format!(
                "{} neighborhood rows for {} queries",
                neighborhoods.n_queries(),
                queries.len()
            ),
        ));
    }
    let k = neighborhoods.k();
    let norm = (2.0 * std::f64::consts::PI).powf(-1.5);
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let prefactor = 1.0 / (k as f64 * sigma);

    let mut values = Vec::with_capacity(queries.len());
    for (q, &pos) in queries.iter().enumerate() {
        let mut sum = 0.0;
        for &j in neighborhoods.row(q) {
            let d2 = super::dist2(cloud.position(j), pos);
            sum += norm * (-d2 * inv_2s2).exp();
        }
        values.push(prefactor * sum);
    }
    Ok(DensityField { values, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::knn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_coincident_neighbor_at_unit_bandwidth() {
        let c = PointCloud::new(vec![[0.5, -0.25, 1.0]]).unwrap();
        let nbr = knn(&c, c.positions(), 1).unwrap();
        let d = kde_density(&c, c.positions(), &nbr, 1.0).unwrap();
        assert!((d.value(0) - 0.06349363593424097).abs() < 1e-15);
    }

    #[test]
    fn coincident_points_hit_the_kernel_peak() {
        // every neighbor at distance zero: density is the bare kernel
        // height regardless of K
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]; 6]).unwrap();
        let nbr = knn(&c, c.positions(), 6).unwrap();
        let sigma = 0.37;
        let d = kde_density(&c, c.positions(), &nbr, sigma).unwrap();
        let expected = (2.0 * std::f64::consts::PI).powf(-1.5) / sigma;
        for &v in d.values() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let c = PointCloud::new(pts.clone()).unwrap();
        let nbr = knn(&c, &pts, 8).unwrap();
        let sigma = 0.3;
        let d = kde_density(&c, &pts, &nbr, sigma).unwrap();

        for q in 0..pts.len() {
            let mut sum = 0.0;
            for &j in nbr.row(q) {
                let dx = pts[j][0] - pts[q][0];
                let dy = pts[j][1] - pts[q][1];
                let dz = pts[j][2] - pts[q][2];
                let r2 = dx * dx + dy * dy + dz * dz;
                sum += (2.0 * std::f64::consts::PI).powf(-1.5)
                    * (-r2 / (2.0 * sigma * sigma)).exp();
            }
            let expected = sum / (8.0 * sigma);
            assert!((d.value(q) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_rescaling_divides_density_by_the_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pts: Vec<[f64; 3]> = (0..30)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let s = 2.5;
        let scaled: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|v| v * s)).collect();

        let ca = PointCloud::new(pts.clone()).unwrap();
        let cb = PointCloud::new(scaled.clone()).unwrap();
        let na = knn(&ca, &pts, 5).unwrap();
        let nb = knn(&cb, &scaled, 5).unwrap();
        let da = kde_density(&ca, &pts, &na, 0.2).unwrap();
        let db = kde_density(&cb, &scaled, &nb, 0.2 * s).unwrap();
        for (a, b) in da.values().iter().zip(db.values()) {
            assert!((a / s - b).abs() < 1e-12);
        }
    }

    #[test]
    fn denser_regions_score_higher() {
        // tight cluster plus a far outlier; K covers the whole cloud
        let mut pts = vec![
            [0.0, 0.0, 0.0],
            [0.05, 0.0, 0.0],
            [0.0, 0.05, 0.0],
            [0.0, 0.0, 0.05],
        ];
        pts.push([10.0, 10.0, 10.0]);
        let c = PointCloud::new(pts.clone()).unwrap();
        let nbr = knn(&c, &pts, 5).unwrap();
        let d = kde_density(&c, &pts, &nbr, 0.1).unwrap();
        for i in 0..4 {
            assert!(d.value(i) > d.value(4));
        }
    }

    #[test]
    fn rejects_bad_bandwidth_and_row_mismatch() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        let nbr = knn(&c, c.positions(), 2).unwrap();
        assert!(kde_density(&c, c.positions(), &nbr, 0.0).is_err());
        assert!(kde_density(&c, c.positions(), &nbr, -1.0).is_err());
        assert!(kde_density(&c, &c.positions()[..1], &nbr, 0.5).is_err());
    }
}
