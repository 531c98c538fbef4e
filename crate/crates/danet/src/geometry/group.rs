//! Differentiable neighborhood gathering and feature propagation.

use super::sample::{knn_points, NeighborhoodIndex};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Gathers per-point features `[n, c]` into per-neighborhood stacks
/// `[q, k, c]` following the neighbor lists. Gradients scatter-add back
/// to the source rows, so points shared by several neighborhoods
/// accumulate from all of them.
pub fn group_features(
    tape: &mut Tape,
    features: NodeId,
    neighborhoods: &NeighborhoodIndex,
) -> Result<NodeId> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(
            "group_features",
            format!("expected rank-2 features, got {:?}", shape),
        ));
    }
    let c = shape[1];
    let gathered = tape.gather_rows(features, neighborhoods.flat())?;
    tape.reshape(gathered, &[neighborhoods.n_queries(), neighborhoods.k(), c])
}

/// Propagates features `[n, c]` from `source_positions` onto
/// `target_positions` by inverse-distance interpolation over each
/// target's three nearest sources:
///
/// ```text
/// w_j = 1 / (|t - s_j| + 1e-8),   f_t = sum_j w_j f_j / sum_j w_j
/// ```
///
/// A target sitting exactly on a source reproduces that source's
/// features (the coincident weight dominates). Returns `[m, c]`.
pub fn interpolate_features(
    tape: &mut Tape,
    features: NodeId,
    source_positions: &[[f64; 3]],
    target_positions: &[[f64; 3]],
) -> Result<NodeId> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != source_positions.len() {
        return Err(Error::shape(
            "interpolate_features",
            format!(
                "features {:?} do not match {} source positions",
                shape,
                source_positions.len()
            ),
        ));
    }
    let c = shape[1];
    let m = target_positions.len();
    if m == 0 {
        return Err(Error::invalid("interpolate_features", "no target positions"));
    }
    let nbr = knn_points(source_positions, target_positions, 3)?;

    let mut weights = Vec::with_capacity(m * 3);
    for t in 0..m {
        let row = nbr.row(t);
        let mut w = [0.0; 3];
        for (slot, &j) in row.iter().enumerate() {
            let d = super::dist2(source_positions[j], target_positions[t]).sqrt();
            w[slot] = 1.0 / (d + 1e-8);
        }
        let total: f64 = w.iter().sum();
        weights.extend(w.iter().map(|v| v / total));
    }

    let gathered = tape.gather_rows(features, nbr.flat())?;
    let stacked = tape.reshape(gathered, &[m, 3, c])?;
    let w = tape.leaf(Tensor::from_vec(&[m, 3, 1], weights)?);
    let w = tape.broadcast_axis(w, 2, c)?;
    let weighted = tape.mul(stacked, w)?;
    tape.sum_axis(weighted, 1)
}
