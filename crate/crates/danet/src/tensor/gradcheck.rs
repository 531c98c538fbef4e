//! Finite-difference verification of tape gradients.

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Compares analytic gradients against central finite differences.
///
/// `build` must construct the same scalar-valued graph every time it is
/// called; it receives a fresh tape and one node per entry of `leaves`.
/// Every leaf is registered as a parameter. For stateful graph pieces
/// (batch norm running statistics, dropout) the closure must reseed or
/// reset that state itself, or the perturbed re-evaluations will drift.
///
/// Returns the worst relative error over all leaf entries,
/// `|analytic - numeric| / max(1, |numeric|)`, where `numeric` is the
/// central difference `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn gradient_check<F>(leaves: &[Tensor], mut build: F, epsilon: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if epsilon <= 0.0 {
        return Err(Error::invalid("gradient_check", "epsilon must be positive"));
    }

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::invalid(
            "gradient_check",
            format!("graph output must be scalar, got {:?}", tape.shape(loss)),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, leaf)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; leaf.len()])
        })
        .collect();
    drop(tape);

    let eval = |leaves: &[Tensor], build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut perturbed = leaves.to_vec();
    for li in 0..leaves.len() {
        for e in 0..leaves[li].len() {
            let orig = perturbed[li].data()[e];
            perturbed[li].data_mut()[e] = orig + epsilon;
            let up = eval(&perturbed, &mut build)?;
            perturbed[li].data_mut()[e] = orig - epsilon;
            let down = eval(&perturbed, &mut build)?;
            perturbed[li].data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let rel = (analytic[li][e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::BatchNormConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::rand_uniform(rng, shape, -1.0, 1.0)
    }

    #[test]
    fn linear_graph_gradient_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2])];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                tape.sum_all(y)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn single_column_matmul_gradient_is_nearly_exact() {
        // a weight with one output column used to hit a transposed gemm
        // buffer in the backward pass
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![
            rand_t(&mut rng, &[14, 4]),
            rand_t(&mut rng, &[4, 1]),
            rand_t(&mut rng, &[1]),
        ];
        let probe = rand_t(&mut rng, &[14, 1]);
        let err = gradient_check(
            &leaves,
            move |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                let y = tape.add_bias(y, ids[2])?;
                let w = tape.leaf(probe.clone());
                let p = tape.mul(y, w)?;
                tape.sum_all(p)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn elementwise_ops_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![rand_t(&mut rng, &[2, 5]), rand_t(&mut rng, &[2, 5])];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let s = tape.add(ids[0], ids[1])?;
                let d = tape.sub(s, ids[1])?;
                let p = tape.mul(d, ids[1])?;
                let sc = tape.scale(p, -1.7)?;
                tape.sum_all(sc)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn softmax_and_log_softmax_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![rand_t(&mut rng, &[3, 6]), rand_t(&mut rng, &[3, 6])];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let sm = tape.softmax(ids[0], 1)?;
                let lsm = tape.log_softmax(ids[1], 1)?;
                let prod = tape.mul(sm, lsm)?;
                tape.sum_all(prod)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn pooling_and_reshaping_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![rand_t(&mut rng, &[2, 4, 3])];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let mx = tape.max_pool(ids[0], 1)?;
                let av = tape.avg_pool(ids[0], 1)?;
                let sm = tape.sum_axis(ids[0], 2)?;
                let smr = tape.reshape(sm, &[2, 4])?;
                let c = tape.concat(&[mx, av, smr], 1)?;
                let p = tape.permute(c, &[1, 0])?;
                tape.sum_all(p)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn gather_slice_broadcast_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[1, 3])];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let g = tape.gather_rows(ids[0], &[1, 1, 3, 0])?;
                let b = tape.broadcast_axis(ids[1], 0, 4)?;
                let s = tape.mul(g, b)?;
                let sl = tape.slice_axis(s, 1, 1, 2)?;
                tape.sum_all(sl)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn bias_and_leaky_relu_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let leaves = vec![
            rand_t(&mut rng, &[5, 3]),
            rand_t(&mut rng, &[3, 4]),
            rand_t(&mut rng, &[4]),
        ];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let h = tape.matmul(ids[0], ids[1])?;
                let h = tape.add_bias(h, ids[2])?;
                let h = tape.leaky_relu(h, 0.2)?;
                tape.sum_all(h)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn batch_norm_training_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let leaves = vec![
            rand_t(&mut rng, &[6, 3]),
            rand_t(&mut rng, &[3]),
            rand_t(&mut rng, &[3]),
        ];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                // fresh running buffers every call so re-evaluations match
                let mut rm = vec![0.0; 3];
                let mut rv = vec![1.0; 3];
                let y = tape.batch_norm(
                    ids[0],
                    ids[1],
                    ids[2],
                    &mut rm,
                    &mut rv,
                    true,
                    BatchNormConfig::default(),
                )?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn batch_norm_eval_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let leaves = vec![
            rand_t(&mut rng, &[4, 2]),
            rand_t(&mut rng, &[2]),
            rand_t(&mut rng, &[2]),
        ];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let mut rm = vec![0.3, -0.6];
                let mut rv = vec![1.8, 0.4];
                let y = tape.batch_norm(
                    ids[0],
                    ids[1],
                    ids[2],
                    &mut rm,
                    &mut rv,
                    false,
                    BatchNormConfig::default(),
                )?;
                tape.sum_all(y)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn dropout_with_fixed_seed_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let leaves = vec![rand_t(&mut rng, &[4, 4])];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                // reseed per call: the mask must be identical across the
                // perturbed evaluations
                let mut drop_rng = ChaCha8Rng::seed_from_u64(1234);
                let y = tape.dropout(ids[0], 0.4, &mut drop_rng)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn daconv_core_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let leaves = vec![
            rand_t(&mut rng, &[2, 4, 3]), // features [g, k, c_in]
            rand_t(&mut rng, &[2, 4, 5]), // weights [g, k, c_mid]
            rand_t(&mut rng, &[3, 5, 6]), // kernel [c_in, c_mid, c_out]
        ];
        let err = gradient_check(
            &leaves,
            |tape, ids| {
                let m = tape.daconv_core(ids[0], ids[1], ids[2])?;
                let pooled = tape.max_pool(m, 1)?;
                let sq = tape.mul(pooled, pooled)?;
                tape.sum_all(sq)
            },
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn random_small_graphs_pass_finite_differences() {
        // A batch of ~50-scalar graphs mixing most ops.
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let leaves = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 4])];
            let err = gradient_check(
                &leaves,
                |tape, ids| {
                    let h = tape.matmul(ids[0], ids[1])?;
                    let s = tape.softmax(h, 1)?;
                    let l = tape.leaky_relu(h, 0.2)?;
                    let m = tape.mul(s, l)?;
                    let p = tape.max_pool(m, 0)?;
                    let a = tape.avg_pool(m, 1)?;
                    let joined = tape.concat(&[p, a], 0)?;
                    tape.sum_all(joined)
                },
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed}: relative error {err}");
        }
    }
}
