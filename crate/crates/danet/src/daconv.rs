//! The density adaptive convolution operator.
//!
//! Each neighborhood is summarized by an 8-component geometric encoding
//! per neighbor. A small MLP turns the encoding into per-neighbor mixing
//! weights over `c_mid` channels (softmax across the neighborhood), and
//! a static rank-3 kernel maps input channels through the mid channels
//! to output channels. Two formulations are provided: the naive one
//! materializes the full per-neighbor weight matrix, the reformulated
//! one factors the contraction into two pointwise convolutions and
//! aggregates over neighbors afterwards. With sum aggregation the two
//! agree to floating-point accuracy; max aggregation is the network
//! default.

use crate::error::{Error, Result};
use crate::geometry::{DensityField, NeighborhoodIndex};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;

/// Width of the hidden layer in the weight-generating MLP.
pub const PHI_HIDDEN: usize = 16;

/// Negative slope shared by every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Per-neighbor geometric descriptors, shape `[n_centers, k, 8]`.
///
/// Component order for center `i` and neighbor `j`:
/// `[p_i (3), p_j - p_i (3), d_j - d_i (1), |p_j - p_i| (1)]`
/// where `d` is the kernel density estimate.
#[derive(Debug, Clone)]
pub struct GeometricEncoding {
    vectors: Tensor,
}

impl GeometricEncoding {
    /// Wraps an already-built `[n_centers, k, 8]` descriptor tensor, e.g.
    /// several per-sample encodings concatenated along the center axis.
    pub fn from_vectors(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 3 || vectors.shape()[2] != 8 {
            return Err(Error::shape(
                "geometric_encoding",
                format!("expected [n, k, 8], got {:?}", vectors.shape()),
            ));
        }
        Ok(GeometricEncoding { vectors })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn n_centers(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Builds the geometric encoding for a set of center points and their
/// neighbor lists. `centers` and every neighbor row index into
/// `positions`; `densities` holds one value per position.
pub fn fuse_geometry(
    positions: &[[f64; 3]],
    densities: &DensityField,
    centers: &[usize],
    nbr: &NeighborhoodIndex,
) -> Result<GeometricEncoding> {
    if densities.values().len() != positions.len() {
        return Err(Error::shape(
            "fuse_geometry",
            format!(
                "{} density values for {} positions",
                densities.values().len(),
                positions.len()
            ),
        ));
    }
    if nbr.n_queries() != centers.len() {
        return Err(Error::shape(
            "fuse_geometry",
            format!(
                "{} neighborhood rows for {} centers",
                nbr.n_queries(),
                centers.len()
            ),
        ));
    }
    if let Some(&bad) = centers
        .iter()
        .chain(nbr.flat())
        .find(|&&i| i >= positions.len())
    {
        return Err(Error::invalid(
            "fuse_geometry",
            format!("point index {} out of range ({} points)", bad, positions.len()),
        ));
    }

    let k = nbr.k();
    let mut data = Vec::with_capacity(centers.len() * k * 8);
    for (q, &ci) in centers.iter().enumerate() {
        let pi = positions[ci];
        let di = densities.value(ci);
        for &j in nbr.row(q) {
            let pj = positions[j];
            let delta = [pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]];
            data.extend_from_slice(&pi);
            data.extend_from_slice(&delta);
            data.push(densities.value(j) - di);
            data.push((delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt());
        }
    }
    Ok(GeometricEncoding {
        vectors: Tensor::from_vec(&[centers.len(), k, 8], data)?,
    })
}

/// How the per-neighbor results are collapsed into one output row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Max,
}

/// Learnable state of one convolution: the static kernel `t`
/// `[c_in, c_mid, c_out]` and the weight-generating MLP
/// (8 -> 16 -> `c_mid`, leaky ReLU between). `sigma` records the KDE
/// bandwidth the surrounding layer uses (`None` for global layers,
/// where the bandwidth falls back to the mean nearest-neighbor
/// distance of the group).
#[derive(Debug, Clone)]
pub struct DAConvParams {
    pub t: Tensor,
    pub phi_w1: Tensor,
    pub phi_b1: Tensor,
    pub phi_w2: Tensor,
    pub phi_b2: Tensor,
    pub aggregation: Aggregation,
    pub sigma: Option<f64>,
}

/// Tape handles for one bound parameter set.
#[derive(Debug, Clone, Copy)]
pub struct DAConvNodes {
    pub t: NodeId,
    pub phi_w1: NodeId,
    pub phi_b1: NodeId,
    pub phi_w2: NodeId,
    pub phi_b2: NodeId,
}

fn uniform_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -bound, bound)
}

impl DAConvParams {
    /// Fresh parameters with weights uniform in `±1/sqrt(fan_in)` and
    /// zero biases. Aggregation defaults to max.
    pub fn init<R: Rng>(c_in: usize, c_mid: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        if c_in == 0 || c_mid == 0 || c_out == 0 {
            return Err(Error::invalid(
                "daconv",
                format!("channel counts must be positive, got {}x{}x{}", c_in, c_mid, c_out),
            ));
        }
        Ok(DAConvParams {
            t: uniform_fan_in(&[c_in, c_mid, c_out], c_in, rng),
            phi_w1: uniform_fan_in(&[8, PHI_HIDDEN], 8, rng),
            phi_b1: Tensor::zeros(&[PHI_HIDDEN]),
            phi_w2: uniform_fan_in(&[PHI_HIDDEN, c_mid], PHI_HIDDEN, rng),
            phi_b2: Tensor::zeros(&[c_mid]),
            aggregation: Aggregation::Max,
            sigma: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn c_mid(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.t.shape()[2]
    }

    /// Registers every tensor as a trainable tape parameter.
    pub fn bind(&self, tape: &mut Tape) -> DAConvNodes {
        DAConvNodes {
            t: tape.param(self.t.clone()),
            phi_w1: tape.param(self.phi_w1.clone()),
            phi_b1: tape.param(self.phi_b1.clone()),
            phi_w2: tape.param(self.phi_w2.clone()),
            phi_b2: tape.param(self.phi_b2.clone()),
        }
    }

    /// Registers every tensor as a constant (forward-only use).
    pub fn bind_constant(&self, tape: &mut Tape) -> DAConvNodes {
        DAConvNodes {
            t: tape.leaf(self.t.clone()),
            phi_w1: tape.leaf(self.phi_w1.clone()),
            phi_b1: tape.leaf(self.phi_b1.clone()),
            phi_w2: tape.leaf(self.phi_w2.clone()),
            phi_b2: tape.leaf(self.phi_b2.clone()),
        }
    }
}

/// Runs the weight-generating MLP over the encoding and normalizes over
/// the neighbor axis: softmax per (center, mid-channel). Returns
/// `[n_centers, k, c_mid]`; every column over k sums to 1.
pub fn adaptive_weights_node(
    tape: &mut Tape,
    enc: &GeometricEncoding,
    nodes: &DAConvNodes,
) -> Result<NodeId> {
    let g = enc.n_centers();
    let k = enc.k();
    let c_mid = tape.shape(nodes.phi_w2)[1];
    let flat_enc = tape.leaf(enc.vectors.clone());
    let flat_enc = tape.reshape(flat_enc, &[g * k, 8])?;
    let h = tape.matmul(flat_enc, nodes.phi_w1)?;
    let h = tape.add_bias(h, nodes.phi_b1)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    let logits = tape.matmul(h, nodes.phi_w2)?;
    let logits = tape.add_bias(logits, nodes.phi_b2)?;
    let logits = tape.reshape(logits, &[g, k, c_mid])?;
    tape.softmax(logits, 1)
}

/// Full convolution on the tape: adaptive weights, the factored
/// contraction, then neighbor aggregation. `features` is
/// `[n_centers, k, c_in]`; the result is `[n_centers, c_out]`.
pub fn daconv_node(
    tape: &mut Tape,
    features: NodeId,
    enc: &GeometricEncoding,
    nodes: &DAConvNodes,
    aggregation: Aggregation,
) -> Result<NodeId> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 || fs[0] != enc.n_centers() || fs[1] != enc.k() {
        return Err(Error::shape(
            "daconv",
            format!(
                "features {:?} do not match encoding {}x{}",
                fs,
                enc.n_centers(),
                enc.k()
            ),
        ));
    }
    let w = adaptive_weights_node(tape, enc, nodes)?;
    let core = tape.daconv_core(features, w, nodes.t)?;
    match aggregation {
        Aggregation::Sum => tape.sum_axis(core, 1),
        Aggregation::Max => tape.max_pool(core, 1),
    }
}

/// Forward-only adaptive weights (see [`adaptive_weights_node`]).
pub fn adaptive_weights(enc: &GeometricEncoding, params: &DAConvParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = params.bind_constant(&mut tape);
    let w = adaptive_weights_node(&mut tape, enc, &nodes)?;
    Ok(tape.value(w).clone())
}

/// Literal formulation: materializes the per-neighbor weight matrix
/// `W[j, c_in, c_out] = sum_mid w[j, mid] * t[c_in, mid, c_out]` and
/// contracts it against the features, summing over neighbors and input
/// channels. Always sums over the neighborhood.
pub fn daconv_naive(
    features: &Tensor,
    enc: &GeometricEncoding,
    params: &DAConvParams,
) -> Result<Tensor> {
    let (g, k) = check_feature_shape(features, enc, params, "daconv_naive")?;
    let (c_in, c_mid, c_out) = (params.c_in(), params.c_mid(), params.c_out());
    let w_tilde = adaptive_weights(enc, params)?;
    let t = params.t.data();
    let f = features.data();
    let wt = w_tilde.data();

    let mut out = vec![0.0; g * c_out];
    let mut w = vec![0.0; c_in * c_out];
    for q in 0..g {
        for j in 0..k {
            w.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..c_in {
                for cm in 0..c_mid {
                    let mix = wt[(q * k + j) * c_mid + cm];
                    let t_row = &t[(ci * c_mid + cm) * c_out..(ci * c_mid + cm + 1) * c_out];
                    let w_row = &mut w[ci * c_out..(ci + 1) * c_out];
                    for (wv, tv) in w_row.iter_mut().zip(t_row) {
                        *wv += mix * tv;
                    }
                }
            }
            for ci in 0..c_in {
                let fv = f[(q * k + j) * c_in + ci];
                let w_row = &w[ci * c_out..(ci + 1) * c_out];
                let o_row = &mut out[q * c_out..(q + 1) * c_out];
                for (ov, wv) in o_row.iter_mut().zip(w_row) {
                    *ov += wv * fv;
                }
            }
        }
    }
    Tensor::from_vec(&[g, c_out], out)
}

/// Factored formulation: features through the static kernel first, a
/// per-neighbor mix by the adaptive weights second, then aggregation
/// over the neighborhood (`params.aggregation`). With sum aggregation
/// this reproduces [`daconv_naive`] to floating-point accuracy.
pub fn daconv_reformulated(
    features: &Tensor,
    enc: &GeometricEncoding,
    params: &DAConvParams,
) -> Result<Tensor> {
    check_feature_shape(features, enc, params, "daconv_reformulated")?;
    let mut tape = Tape::new();
    let nodes = params.bind_constant(&mut tape);
    let f = tape.leaf(features.clone());
    let out = daconv_node(&mut tape, f, enc, &nodes, params.aggregation)?;
    Ok(tape.value(out).clone())
}

fn check_feature_shape(
    features: &Tensor,
    enc: &GeometricEncoding,
    params: &DAConvParams,
    op: &'static str,
) -> Result<(usize, usize)> {
    let fs = features.shape();
    if fs.len() != 3 || fs[0] != enc.n_centers() || fs[1] != enc.k() || fs[2] != params.c_in() {
        return Err(Error::shape(
            op,
            format!(
                "features {:?} do not match encoding {}x{} with c_in {}",
                fs,
                enc.n_centers(),
                enc.k(),
                params.c_in()
            ),
        ));
    }
    Ok((fs[0], fs[1]))
}

/// Which convolution formulation a cost report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostVariant {
    Naive,
    Reformulated,
}

/// Arithmetic cost of one convolution at one center.
///
/// `dynamic_weight_count` is how many weights depend on the
/// neighborhood geometry and must be produced per center at run time;
/// `static_weight_count` is shared storage reused everywhere;
/// `multiply_add_count` follows the formulation's contraction schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub dynamic_weight_count: usize,
    pub static_weight_count: usize,
    pub multiply_add_count: usize,
}

/// Per-center cost of one convolution over `k` neighbors.
///
/// Naive: generates `k*c_in*c_out` dynamic weights (each a `c_mid`-term
/// mix, `k*c_in*c_mid*c_out` multiply-adds) and contracts them against
/// the features (`k*c_in*c_out` more). Reformulated: only the
/// `k*c_mid` mixing weights are dynamic; features pass through the
/// static kernel (`k*c_in*c_mid*c_out`), get mixed (`k*c_mid*c_out`),
/// and are aggregated (`k*c_out`).
pub fn count_cost(
    k: usize,
    c_in: usize,
    c_mid: usize,
    c_out: usize,
    variant: CostVariant,
) -> Result<CostReport> {
    if k == 0 || c_in == 0 || c_mid == 0 || c_out == 0 {
        return Err(Error::invalid(
            "count_cost",
            format!("all sizes must be positive, got k={} {}x{}x{}", k, c_in, c_mid, c_out),
        ));
    }
    Ok(match variant {
        CostVariant::Naive => CostReport {
            dynamic_weight_count: k * c_in * c_out,
            static_weight_count: c_in * c_mid * c_out,
            multiply_add_count: k * c_in * c_mid * c_out + k * c_in * c_out,
        },
        CostVariant::Reformulated => CostReport {
            dynamic_weight_count: k * c_mid,
            static_weight_count: c_in * c_mid * c_out,
            multiply_add_count: k * c_in * c_mid * c_out + k * c_mid * c_out + k * c_out,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{kde_density, knn, PointCloud};
    use crate::tensor::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(values: Vec<f64>) -> DensityField {
        DensityField::from_values(values, 1.0).unwrap()
    }

    fn random_params(
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        seed: u64,
    ) -> DAConvParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DAConvParams::init(c_in, c_mid, c_out, &mut rng).unwrap();
        // random biases so the MLP is not accidentally linear around 0
        p.phi_b1 = Tensor::rand_uniform(&mut rng, &[PHI_HIDDEN], -0.5, 0.5);
        p.phi_b2 = Tensor::rand_uniform(&mut rng, &[c_mid], -0.5, 0.5);
        p
    }

    fn random_encoding(g: usize, k: usize, seed: u64) -> GeometricEncoding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(g * k * 8);
        for _ in 0..g * k {
            for c in 0..8 {
                let v: f64 = rng.random_range(-1.0..1.0);
                data.push(if c == 7 { v.abs() } else { v });
            }
        }
        GeometricEncoding {
            vectors: Tensor::from_vec(&[g, k, 8], data).unwrap(),
        }
    }

    #[test]
    fn fusion_substitutes_components_in_order() {
        let positions = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let densities = field(vec![0.5, 0.7]);
        let nbr = crate::geometry::knn_points(&positions, &[[0.0, 0.0, 0.0]], 2).unwrap();
        // row is [self, other]
        let enc = fuse_geometry(&positions, &densities, &[0], &nbr).unwrap();
        assert_eq!(enc.vectors().shape(), &[1, 2, 8]);
        let v = enc.vectors().data();
        assert_eq!(&v[0..8], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[8..14], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((v[14] - 0.2).abs() < 1e-15);
        assert_eq!(v[15], 1.0);
    }

    #[test]
    fn fusion_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let nbr_all = knn(&cloud, &pts, 6).unwrap();
        let dens = kde_density(&cloud, &pts, &nbr_all, 0.3).unwrap();
        let centers = [3, 17, 30];
        let centers_pos: Vec<[f64; 3]> = centers.iter().map(|&i| pts[i]).collect();
        let nbr = knn(&cloud, &centers_pos, 5).unwrap();
        let enc = fuse_geometry(&pts, &dens, &centers, &nbr).unwrap();

        for (q, &ci) in centers.iter().enumerate() {
            for (slot, &j) in nbr.row(q).iter().enumerate() {
                let row = &enc.vectors().data()[(q * 5 + slot) * 8..(q * 5 + slot + 1) * 8];
                let delta: Vec<f64> = (0..3).map(|a| pts[j][a] - pts[ci][a]).collect();
                assert_eq!(&row[0..3], &pts[ci]);
                assert_eq!(&row[3..6], &delta[..]);
                assert_eq!(row[6], dens.value(j) - dens.value(ci));
                let norm = (delta[0].powi(2) + delta[1].powi(2) + delta[2].powi(2)).sqrt();
                assert!((row[7] - norm).abs() < 1e-15);
                assert!(row[7] >= 0.0);
            }
        }
    }

    #[test]
    fn fusion_validates_indices_and_lengths() {
        let positions = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let nbr = crate::geometry::knn_points(&positions, &[[0.0; 3]], 2).unwrap();
        assert!(fuse_geometry(&positions, &field(vec![0.1]), &[0], &nbr).is_err());
        assert!(fuse_geometry(&positions, &field(vec![0.1, 0.2]), &[5], &nbr).is_err());
        assert!(fuse_geometry(&positions, &field(vec![0.1, 0.2]), &[0, 1], &nbr).is_err());
    }

    #[test]
    fn equal_descriptors_give_uniform_weights() {
        // all neighbors coincide with the center: identical rows
        let positions = [[0.5, 0.5, 0.5]; 4];
        let densities = field(vec![1.0; 4]);
        let nbr = crate::geometry::knn_points(&positions, &[positions[0]], 4).unwrap();
        let enc = fuse_geometry(&positions, &densities, &[0], &nbr).unwrap();
        let params = random_params(2, 3, 2, 9);
        let w = adaptive_weights(&enc, &params).unwrap();
        assert_eq!(w.shape(), &[1, 4, 3]);
        for &v in w.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_neighborhood_weight_is_one() {
        let enc = random_encoding(3, 1, 4);
        let params = random_params(2, 5, 2, 5);
        let w = adaptive_weights(&enc, &params).unwrap();
        for &v in w.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_columns_form_distributions() {
        let enc = random_encoding(4, 7, 6);
        let params = random_params(3, 5, 4, 7);
        let w = adaptive_weights(&enc, &params).unwrap();
        for q in 0..4 {
            for cm in 0..5 {
                let col: Vec<f64> = (0..7).map(|j| w.at(&[q, j, cm])).collect();
                let sum: f64 = col.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(col.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        // independent softmax over the raw MLP outputs
        let mut tape = Tape::new();
        let nodes = params.bind_constant(&mut tape);
        let flat = tape.leaf(enc.vectors().clone());
        let flat = tape.reshape(flat, &[28, 8]).unwrap();
        let h = tape.matmul(flat, nodes.phi_w1).unwrap();
        let h = tape.add_bias(h, nodes.phi_b1).unwrap();
        let h = tape.leaky_relu(h, LEAKY_SLOPE).unwrap();
        let l = tape.matmul(h, nodes.phi_w2).unwrap();
        let l = tape.add_bias(l, nodes.phi_b2).unwrap();
        let logits = tape.value(l).clone();
        for q in 0..4 {
            for cm in 0..5 {
                let col: Vec<f64> = (0..7).map(|j| logits.at(&[q * 7 + j, cm])).collect();
                let exps: Vec<f64> = col.iter().map(|v| v.exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..7 {
                    assert!((w.at(&[q, j, cm]) - exps[j] / denom).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let enc = random_encoding(2, 4, 8);
        let mut params = random_params(3, 2, 5, 9);
        params.t = Tensor::zeros(&[3, 2, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = Tensor::rand_uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
        assert!(daconv_naive(&f, &enc, &params).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(daconv_reformulated(&f, &enc, &params)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_case_passes_value_through() {
        // K=1 makes the softmax weight exactly 1; T=1 and f=3 give 3
        let enc = random_encoding(1, 1, 11);
        let mut params = random_params(1, 1, 1, 12);
        params.t = Tensor::full(&[1, 1, 1], 1.0);
        let f = Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap();
        assert!((daconv_naive(&f, &enc, &params).unwrap().data()[0] - 3.0).abs() < 1e-15);
        for agg in [Aggregation::Sum, Aggregation::Max] {
            params.aggregation = agg;
            let out = daconv_reformulated(&f, &enc, &params).unwrap();
            assert!((out.data()[0] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn naive_matches_materialized_loop_oracle() {
        let (g, k, c_in, c_mid, c_out) = (3, 8, 4, 3, 5);
        let enc = random_encoding(g, k, 13);
        let params = random_params(c_in, c_mid, c_out, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = Tensor::rand_uniform(&mut rng, &[g, k, c_in], -1.0, 1.0);
        let out = daconv_naive(&f, &enc, &params).unwrap();

        let wt = adaptive_weights(&enc, &params).unwrap();
        for q in 0..g {
            for co in 0..c_out {
                let mut acc = 0.0;
                for j in 0..k {
                    for ci in 0..c_in {
                        let mut w = 0.0;
                        for cm in 0..c_mid {
                            w += wt.at(&[q, j, cm]) * params.t.at(&[ci, cm, co]);
                        }
                        acc += w * f.at(&[q, j, ci]);
                    }
                }
                assert!((out.at(&[q, co]) - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sum_aggregation_reproduces_the_naive_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..20 {
            let g = rng.random_range(1..4);
            let k = rng.random_range(1..12);
            let c_in = rng.random_range(1..10);
            let c_mid = rng.random_range(1..6);
            let c_out = rng.random_range(1..10);
            let enc = random_encoding(g, k, 100 + trial);
            let mut params = random_params(c_in, c_mid, c_out, 200 + trial);
            params.aggregation = Aggregation::Sum;
            let f = Tensor::rand_uniform(&mut rng, &[g, k, c_in], -1.0, 1.0);
            let a = daconv_naive(&f, &enc, &params).unwrap();
            let b = daconv_reformulated(&f, &enc, &params).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() / (x.abs() + 1e-12) < 1e-10);
            }
        }
    }

    #[test]
    fn single_neighbor_sum_and_max_coincide() {
        let enc = random_encoding(4, 1, 17);
        let mut params = random_params(3, 2, 6, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = Tensor::rand_uniform(&mut rng, &[4, 1, 3], -1.0, 1.0);
        params.aggregation = Aggregation::Sum;
        let a = daconv_reformulated(&f, &enc, &params).unwrap();
        params.aggregation = Aggregation::Max;
        let b = daconv_reformulated(&f, &enc, &params).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn max_aggregation_takes_per_channel_maxima() {
        let (g, k, c_in, c_mid, c_out) = (2, 5, 3, 2, 4);
        let enc = random_encoding(g, k, 20);
        let mut params = random_params(c_in, c_mid, c_out, 21);
        params.aggregation = Aggregation::Max;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f = Tensor::rand_uniform(&mut rng, &[g, k, c_in], -1.0, 1.0);
        let out = daconv_reformulated(&f, &enc, &params).unwrap();

        let wt = adaptive_weights(&enc, &params).unwrap();
        for q in 0..g {
            for co in 0..c_out {
                let mut best = f64::NEG_INFINITY;
                for j in 0..k {
                    let mut m = 0.0;
                    for cm in 0..c_mid {
                        let mut h = 0.0;
                        for ci in 0..c_in {
                            h += params.t.at(&[ci, cm, co]) * f.at(&[q, j, ci]);
                        }
                        m += wt.at(&[q, j, cm]) * h;
                    }
                    best = best.max(m);
                }
                assert!((out.at(&[q, co]) - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_is_linear_in_the_features() {
        let enc = random_encoding(2, 6, 23);
        let mut params = random_params(4, 3, 5, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let f = Tensor::rand_uniform(&mut rng, &[2, 6, 4], -1.0, 1.0);
        let scaled = Tensor::from_vec(&[2, 6, 4], f.data().iter().map(|v| v * 2.5).collect()).unwrap();

        let a = daconv_naive(&f, &enc, &params).unwrap();
        let b = daconv_naive(&scaled, &enc, &params).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.5 * x - y).abs() < 1e-10);
        }
        for agg in [Aggregation::Sum, Aggregation::Max] {
            params.aggregation = agg;
            let a = daconv_reformulated(&f, &enc, &params).unwrap();
            let b = daconv_reformulated(&scaled, &enc, &params).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.5 * x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zeroing_the_center_slot_makes_the_operator_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let pts: Vec<[f64; 3]> = (0..30)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 7.0, p[1] - 2.0, p[2] + 3.5]).collect();
        let centers = [0, 10, 20];
        let k = 6;
        let params = random_params(3, 4, 5, 27);
        let f = Tensor::rand_uniform(&mut rng, &[3, k, 3], -1.0, 1.0);

        let run = |positions: &[[f64; 3]]| -> Tensor {
            let cloud = PointCloud::new(positions.to_vec()).unwrap();
            let nbr_all = knn(&cloud, positions, 8).unwrap();
            let dens = kde_density(&cloud, positions, &nbr_all, 0.4).unwrap();
            let centers_pos: Vec<[f64; 3]> = centers.iter().map(|&i| positions[i]).collect();
            let nbr = knn(&cloud, &centers_pos, k).unwrap();
            let mut enc = fuse_geometry(positions, &dens, &centers, &nbr).unwrap();
            // drop the absolute-position component
            for row in 0..3 * k {
                for c in 0..3 {
                    enc.vectors.data_mut()[row * 8 + c] = 0.0;
                }
            }
            daconv_reformulated(&f, &enc, &params).unwrap()
        };

        let a = run(&pts);
        let b = run(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() / (x.abs() + 1e-12) < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn full_block_passes_gradient_check() {
        let (g, k, c_in, c_mid, c_out) = (2, 4, 3, 3, 2);
        let enc = random_encoding(g, k, 28);
        let seed_params = random_params(c_in, c_mid, c_out, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let f = Tensor::rand_uniform(&mut rng, &[g, k, c_in], -1.0, 1.0);

        let leaves = [
            seed_params.t.clone(),
            seed_params.phi_w1.clone(),
            seed_params.phi_b1.clone(),
            seed_params.phi_w2.clone(),
            seed_params.phi_b2.clone(),
            f,
        ];
        let worst = gradient_check(
            &leaves,
            move |tape, ids| {
                let nodes = DAConvNodes {
                    t: ids[0],
                    phi_w1: ids[1],
                    phi_b1: ids[2],
                    phi_w2: ids[3],
                    phi_b2: ids[4],
                };
                let out = daconv_node(tape, ids[5], &enc, &nodes, Aggregation::Max)?;
                tape.sum_all(out)
            },
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {}", worst);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let enc = random_encoding(2, 3, 31);
        let params = random_params(4, 2, 5, 32);
        let bad = Tensor::zeros(&[2, 3, 7]);
        assert!(daconv_naive(&bad, &enc, &params).is_err());
        assert!(daconv_reformulated(&bad, &enc, &params).is_err());
        let bad_rows = Tensor::zeros(&[1, 3, 4]);
        assert!(daconv_naive(&bad_rows, &enc, &params).is_err());
    }

    #[test]
    fn cost_report_matches_the_stated_schedules() {
        let naive = count_cost(30, 64, 16, 64, CostVariant::Naive).unwrap();
        assert_eq!(naive.dynamic_weight_count, 122_880);
        assert_eq!(naive.multiply_add_count, 30 * 64 * 16 * 64 + 30 * 64 * 64);

        let refo = count_cost(30, 64, 16, 64, CostVariant::Reformulated).unwrap();
        assert_eq!(refo.dynamic_weight_count, 480);
        assert_eq!(refo.static_weight_count, 65_536);
        assert_eq!(refo.multiply_add_count, 30 * 64 * 16 * 64 + 30 * 16 * 64 + 30 * 64);
        assert!(refo.multiply_add_count < naive.multiply_add_count);

        for variant in [CostVariant::Naive, CostVariant::Reformulated] {
            let one = count_cost(1, 1, 1, 1, variant).unwrap();
            assert_eq!(one.dynamic_weight_count, 1);
        }
        assert!(count_cost(0, 1, 1, 1, CostVariant::Naive).is_err());
    }
}
