//! Interactive attention over grouped point features.
//!
//! Input is a `[b, c, n, k]` block: `n` neighborhood groups of `k`
//! points each. The module pools the block along each spatial
//! direction, encodes both pooled maps with one shared channel MLP,
//! turns them into a group attention map (softmax over `n`) and a local
//! attention map (softmax over `k`), and applies their product to the
//! input with a residual connection.

use crate::daconv::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;

/// Reduction ratios the module supports.
pub const SUPPORTED_RATIOS: [usize; 4] = [4, 8, 16, 32];

/// Learnable state: a shared channel-reducing MLP `c -> ceil(c/r)` and
/// two attention MLPs mapping the reduced channels back to `c`, one per
/// spatial direction.
#[derive(Debug, Clone)]
pub struct IAMParams {
    pub shared_w: Tensor,
    pub shared_b: Tensor,
    pub attn_n_w: Tensor,
    pub attn_n_b: Tensor,
    pub attn_k_w: Tensor,
    pub attn_k_b: Tensor,
    pub reduction_ratio: usize,
}

/// Tape handles for one bound parameter set.
#[derive(Debug, Clone, Copy)]
pub struct IAMNodes {
    pub shared_w: NodeId,
    pub shared_b: NodeId,
    pub attn_n_w: NodeId,
    pub attn_n_b: NodeId,
    pub attn_k_w: NodeId,
    pub attn_k_b: NodeId,
}

/// Reduced channel count for `c` channels at ratio `r`.
pub fn reduced_channels(c: usize, r: usize) -> usize {
    c.div_ceil(r)
}

impl IAMParams {
    /// Fresh parameters for `c` input channels. Weights are uniform in
    /// `±1/sqrt(fan_in)`, biases zero. `reduction_ratio` must be one of
    /// [`SUPPORTED_RATIOS`].
    pub fn init<R: Rng>(c: usize, reduction_ratio: usize, rng: &mut R) -> Result<Self> {
        if c == 0 {
            return Err(Error::invalid("iam", "channel count must be positive"));
        }
        if !SUPPORTED_RATIOS.contains(&reduction_ratio) {
            return Err(Error::invalid(
                "iam",
                format!(
                    "reduction ratio {} not supported (choose from {:?})",
                    reduction_ratio, SUPPORTED_RATIOS
                ),
            ));
        }
        let cr = reduced_channels(c, reduction_ratio);
        let bound_c = 1.0 / (c as f64).sqrt();
        let bound_cr = 1.0 / (cr as f64).sqrt();
        Ok(IAMParams {
            shared_w: Tensor::rand_uniform(rng, &[c, cr], -bound_c, bound_c),
            shared_b: Tensor::zeros(&[cr]),
            attn_n_w: Tensor::rand_uniform(rng, &[cr, c], -bound_cr, bound_cr),
            attn_n_b: Tensor::zeros(&[c]),
            attn_k_w: Tensor::rand_uniform(rng, &[cr, c], -bound_cr, bound_cr),
            attn_k_b: Tensor::zeros(&[c]),
            reduction_ratio,
        })
    }

    /// Zeroes both attention MLPs, making the maps uniform: the module
    /// then scales its input by exactly `1 + 1/(n*k)`.
    pub fn zero_attention(&mut self) {
        let (cr, c) = (self.attn_n_w.shape()[0], self.attn_n_w.shape()[1]);
        self.attn_n_w = Tensor::zeros(&[cr, c]);
        self.attn_n_b = Tensor::zeros(&[c]);
        self.attn_k_w = Tensor::zeros(&[cr, c]);
        self.attn_k_b = Tensor::zeros(&[c]);
    }

    pub fn channels(&self) -> usize {
        self.shared_w.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> IAMNodes {
        IAMNodes {
            shared_w: tape.param(self.shared_w.clone()),
            shared_b: tape.param(self.shared_b.clone()),
            attn_n_w: tape.param(self.attn_n_w.clone()),
            attn_n_b: tape.param(self.attn_n_b.clone()),
            attn_k_w: tape.param(self.attn_k_w.clone()),
            attn_k_b: tape.param(self.attn_k_b.clone()),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> IAMNodes {
        IAMNodes {
            shared_w: tape.leaf(self.shared_w.clone()),
            shared_b: tape.leaf(self.shared_b.clone()),
            attn_n_w: tape.leaf(self.attn_n_w.clone()),
            attn_n_b: tape.leaf(self.attn_n_b.clone()),
            attn_k_w: tape.leaf(self.attn_k_w.clone()),
            attn_k_b: tape.leaf(self.attn_k_b.clone()),
        }
    }
}

fn check_input(tape: &Tape, f: NodeId, c: usize, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(f);
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected rank-4 input, got {:?}", s)));
    }
    if s[1] != c {
        return Err(Error::shape(
            op,
            format!("input has {} channels, parameters expect {}", s[1], c),
        ));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Mean-pools `[b, c, n, k]` along each spatial direction and stacks
/// the two maps along the spatial axis: `[b, c, n+k, 1]`, group means
/// first.
pub fn direction_pools(tape: &mut Tape, features: NodeId) -> Result<NodeId> {
    let s = tape.shape(features);
    if s.len() != 4 {
        return Err(Error::shape(
            "direction_pools",
            format!("expected rank-4 input, got {:?}", s),
        ));
    }
    let [b, c, n, k] = [s[0], s[1], s[2], s[3]];
    let over_k = tape.avg_pool(features, 3)?;
    let over_k = tape.reshape(over_k, &[b, c, n, 1])?;
    let over_n = tape.avg_pool(features, 2)?;
    let over_n = tape.reshape(over_n, &[b, c, k, 1])?;
    tape.concat(&[over_k, over_n], 2)
}

/// Applies a per-position channel map `[c_in] -> [c_out]` to a
/// `[b, c_in, p, 1]` block, returning `[b, c_out, p, 1]`.
fn channel_mlp(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let s = tape.shape(x).to_vec();
    let (b, p) = (s[0], s[2]);
    let c_out = tape.shape(w)[1];
    let x = tape.permute(x, &[0, 2, 3, 1])?;
    let x = tape.reshape(x, &[b * p, s[1]])?;
    let x = tape.matmul(x, w)?;
    let x = tape.add_bias(x, bias)?;
    let x = tape.reshape(x, &[b, p, c_out])?;
    let x = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(x, &[b, c_out, p, 1])
}

/// Pools, encodes with the shared MLP, and splits back into the two
/// directional maps: `([b, c/r, n, 1], [b, c/r, 1, k])`.
pub fn encode_spatial_node(
    tape: &mut Tape,
    features: NodeId,
    nodes: &IAMNodes,
) -> Result<(NodeId, NodeId)> {
    let c = tape.shape(nodes.shared_w)[0];
    let [_, _, n, k] = check_input(tape, features, c, "encode_spatial")?;
    let pooled = direction_pools(tape, features)?;
    let enc = channel_mlp(tape, pooled, nodes.shared_w, nodes.shared_b)?;
    let enc = tape.leaky_relu(enc, LEAKY_SLOPE)?;
    let out_n = tape.slice_axis(enc, 2, 0, n)?;
    let out_k = tape.slice_axis(enc, 2, n, k)?;
    let out_k = tape.permute(out_k, &[0, 1, 3, 2])?;
    Ok((out_n, out_k))
}

/// Maps the encoded directional features to attention maps: softmax
/// over groups for the first, over neighbors for the second. Returns
/// `([b, c, n, 1], [b, c, 1, k])`.
pub fn attention_maps_node(
    tape: &mut Tape,
    f_out_n: NodeId,
    f_out_k: NodeId,
    nodes: &IAMNodes,
) -> Result<(NodeId, NodeId)> {
    let sn = tape.shape(f_out_n).to_vec();
    let sk = tape.shape(f_out_k).to_vec();
    let cr = tape.shape(nodes.attn_n_w)[0];
    if sn.len() != 4 || sn[1] != cr || sn[3] != 1 {
        return Err(Error::shape(
            "attention_maps",
            format!("group map {:?} does not match reduced channels {}", sn, cr),
        ));
    }
    if sk.len() != 4 || sk[1] != cr || sk[2] != 1 {
        return Err(Error::shape(
            "attention_maps",
            format!("local map {:?} does not match reduced channels {}", sk, cr),
        ));
    }
    let a_n = channel_mlp(tape, f_out_n, nodes.attn_n_w, nodes.attn_n_b)?;
    let a_n = tape.softmax(a_n, 2)?;

    let k = sk[3];
    let f_k = tape.permute(f_out_k, &[0, 1, 3, 2])?;
    let a_k = channel_mlp(tape, f_k, nodes.attn_k_w, nodes.attn_k_b)?;
    let a_k = tape.permute(a_k, &[0, 1, 3, 2])?;
    let a_k = tape.softmax(a_k, 3)?;
    debug_assert_eq!(tape.shape(a_k)[3], k);
    Ok((a_n, a_k))
}

/// Full module: attention maps from the input, broadcast to the input
/// shape, elementwise product, plus the residual. Output shape equals
/// input shape.
pub fn apply_iam_node(tape: &mut Tape, features: NodeId, nodes: &IAMNodes) -> Result<NodeId> {
    let c = tape.shape(nodes.shared_w)[0];
    let [_, _, n, k] = check_input(tape, features, c, "apply_iam")?;
    let (f_n, f_k) = encode_spatial_node(tape, features, nodes)?;
    let (a_n, a_k) = attention_maps_node(tape, f_n, f_k, nodes)?;
    let a_n = tape.broadcast_axis(a_n, 3, k)?;
    let a_k = tape.broadcast_axis(a_k, 2, n)?;
    let scaled = tape.mul(a_n, a_k)?;
    let scaled = tape.mul(scaled, features)?;
    tape.add(scaled, features)
}

/// Forward-only [`encode_spatial_node`].
pub fn encode_spatial(features: &Tensor, params: &IAMParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let nodes = params.bind_constant(&mut tape);
    let f = tape.leaf(features.clone());
    let (n, k) = encode_spatial_node(&mut tape, f, &nodes)?;
    Ok((tape.value(n).clone(), tape.value(k).clone()))
}

/// Forward-only [`attention_maps_node`].
pub fn attention_maps(
    f_out_n: &Tensor,
    f_out_k: &Tensor,
    params: &IAMParams,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let nodes = params.bind_constant(&mut tape);
    let fn_id = tape.leaf(f_out_n.clone());
    let fk_id = tape.leaf(f_out_k.clone());
    let (a_n, a_k) = attention_maps_node(&mut tape, fn_id, fk_id, &nodes)?;
    Ok((tape.value(a_n).clone(), tape.value(a_k).clone()))
}

/// Forward-only [`apply_iam_node`].
pub fn apply_iam(features: &Tensor, params: &IAMParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = params.bind_constant(&mut tape);
    let f = tape.leaf(features.clone());
    let out = apply_iam_node(&mut tape, f, &nodes)?;
    Ok(tape.value(out).clone())
}

/// Multiply-add count of one module application to a `[1, c, n, k]`
/// block: directional pooling, shared MLP over `n + k` positions, both
/// attention MLPs, and the broadcast product with the residual. Higher
/// ratios shrink the MLP terms.
pub fn count_flops(c: usize, n: usize, k: usize, r: usize) -> Result<usize> {
    if !SUPPORTED_RATIOS.contains(&r) {
        return Err(Error::invalid(
            "iam",
            format!("reduction ratio {} not supported", r),
        ));
    }
    let cr = reduced_channels(c, r);
    let pools = c * n * k * 2;
    let shared = (n + k) * c * cr;
    let attn = n * cr * c + k * cr * c;
    let apply = 2 * c * n * k;
    Ok(pools + shared + attn + apply)
}
