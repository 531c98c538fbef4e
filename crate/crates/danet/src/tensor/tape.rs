//! Computation tape: forward ops and the reverse sweep.

use super::gemm;
use super::{outer_inner, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it; a tape and its nodes form a single-threaded unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    SliceAxis { input: usize, axis: usize, start: usize },
    GatherRows { input: usize, indices: Vec<usize> },
    Permute { input: usize, perm: Vec<usize> },
    Reshape(usize),
    BroadcastAxis { input: usize, axis: usize },
    Softmax { input: usize, axis: usize },
    LogSoftmax { input: usize, axis: usize },
    MaxPool { input: usize, argmax: Vec<usize> },
    AvgPool { input: usize, axis: usize },
    SumAxis { input: usize, axis: usize },
    SumAll(usize),
    LeakyRelu { input: usize, slope: f64 },
    Dropout { input: usize, mask: Vec<f64> },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    DaconvCore { features: usize, weights: usize, kernel: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only graph of tensor operations. Ops are recorded in
/// topological order by construction, so [`Tape::backward`] is a single
/// reverse sweep that visits each node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a constant on the tape. No gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Places a trainable tensor on the tape; `backward` fills its grad.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. this node, if the
    /// node participated in that computation.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op_name: &'static str, value: Tensor, parents: &[usize], op: Op) -> Result<NodeId> {
        ensure_finite(op_name, value.data())?;
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        self.push_op(name, value, &[a.0, b.0], op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(xv.shape(), data)?;
        self.push_op("scale", value, &[x.0], Op::Scale(x.0, factor))
    }

    /// `a` is `[m, k]`, `b` is `[k, n]`; result is `[m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("wants rank-2 operands, got {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = gemm::mm(av.data(), m, k, bv.data(), n);
        let value = Tensor::from_vec(&[m, n], data)?;
        self.push_op("matmul", value, &[a.0, b.0], Op::MatMul(a.0, b.0))
    }

    /// Adds a `[c]` bias to every row of an `[r, c]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "add_bias",
                format!("matrix {:?} with bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let c = bv.shape()[0];
        let mut data = xv.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        let value = Tensor::from_vec(xv.shape(), data)?;
        self.push_op("add_bias", value, &[x.0, bias.0], Op::AddBias(x.0, bias.0))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {} out of range for rank {}", axis, first.len()),
            ));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (&a, &b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not align with {:?} off axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = outer_inner(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        let out_block = axis_total * inner;
        for o in 0..outer {
            let mut dst = o * out_block;
            for &id in inputs {
                let v = &self.nodes[id.0].value;
                let len = v.shape()[axis] * inner;
                let src = o * len;
                data[dst..dst + len].copy_from_slice(&v.data()[src..src + len]);
                dst += len;
            }
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        let parents: Vec<usize> = inputs.iter().map(|id| id.0).collect();
        self.push_op(
            "concat",
            value,
            &parents,
            Op::Concat {
                inputs: parents.clone(),
                axis,
            },
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::invalid(
                "slice_axis",
                format!("axis {} out of range for rank {}", axis, xv.rank()),
            ));
        }
        if len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::invalid(
                "slice_axis",
                format!(
                    "range {}..{} out of bounds for extent {}",
                    start,
                    start + len,
                    xv.shape()[axis]
                ),
            ));
        }
        let (outer, axis_len, inner) = outer_inner(xv.shape(), axis);
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push_op(
            "slice_axis",
            value,
            &[x.0],
            Op::SliceAxis {
                input: x.0,
                axis,
                start,
            },
        )
    }

    /// Gathers rows of a `[n, c]` matrix; the gradient scatter-adds back.
    /// Indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::shape(
                "gather_rows",
                format!("wants a rank-2 input, got {:?}", xv.shape()),
            ));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row index {} out of range for {} rows", bad, n),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_vec(&[indices.len(), c], data)?;
        self.push_op(
            "gather_rows",
            value,
            &[x.0],
            Op::GatherRows {
                input: x.0,
                indices: indices.to_vec(),
            },
        )
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let (shape, data) = permute_data(xv.shape(), xv.data(), perm);
        let value = Tensor::from_vec(&shape, data)?;
        self.push_op(
            "permute",
            value,
            &[x.0],
            Op::Permute {
                input: x.0,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let value = xv.clone().reshaped(shape)?;
        self.push_op("reshape", value, &[x.0], Op::Reshape(x.0))
    }

    /// Repeats a size-1 axis `n` times. The gradient sums back over it.
    pub fn broadcast_axis(&mut self, x: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() || xv.shape()[axis] != 1 {
            return Err(Error::invalid(
                "broadcast_axis",
                format!("axis {} of {:?} is not a unit axis", axis, xv.shape()),
            ));
        }
        if n == 0 {
            return Err(Error::invalid("broadcast_axis", "zero repeat count"));
        }
        let (outer, _, inner) = outer_inner(xv.shape(), axis);
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = n;
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &xv.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push_op(
            "broadcast_axis",
            value,
            &[x.0],
            Op::BroadcastAxis { input: x.0, axis },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.softmax_like(x, axis, false)?;
        self.push_op("softmax", value, &[x.0], Op::Softmax { input: x.0, axis })
    }

    /// Log of softmax along `axis`, computed without forming the softmax.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.softmax_like(x, axis, true)?;
        self.push_op("log_softmax", value, &[x.0], Op::LogSoftmax { input: x.0, axis })
    }

    fn softmax_like(&self, x: NodeId, axis: usize, log: bool) -> Result<Tensor> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {} out of range for rank {}", axis, xv.rank()),
            ));
        }
        let (outer, len, inner) = outer_inner(xv.shape(), axis);
        let src = xv.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut hi = f64::NEG_INFINITY;
                for a in 0..len {
                    hi = hi.max(src[idx(a)]);
                }
                let mut denom = 0.0;
                for a in 0..len {
                    denom += (src[idx(a)] - hi).exp();
                }
                if log {
                    let log_denom = denom.ln();
                    for a in 0..len {
                        data[idx(a)] = src[idx(a)] - hi - log_denom;
                    }
                } else {
                    for a in 0..len {
                        data[idx(a)] = (src[idx(a)] - hi).exp() / denom;
                    }
                }
            }
        }
        Tensor::from_vec(xv.shape(), data)
    }

    /// Max-reduce along `axis`, removing it. Ties keep the lowest flat
    /// index, which makes the backward routing deterministic.
    pub fn max_pool(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::invalid(
                "max_pool",
                format!("axis {} out of range for rank {}", axis, xv.rank()),
            ));
        }
        let (outer, len, inner) = outer_inner(xv.shape(), axis);
        let src = xv.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for a in 0..len {
                    let flat = (o * len + a) * inner + i;
                    if src[flat] > best {
                        best = src[flat];
                        arg = flat;
                    }
                }
                data.push(best);
                argmax.push(arg);
            }
        }
        let value = Tensor::from_vec(&reduced_shape(xv.shape(), axis), data)?;
        self.push_op(
            "max_pool",
            value,
            &[x.0],
            Op::MaxPool {
                input: x.0,
                argmax,
            },
        )
    }

    /// Mean-reduce along `axis`, removing it.
    pub fn avg_pool(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.reduce_sum(x, axis, true)?;
        self.push_op("avg_pool", value, &[x.0], Op::AvgPool { input: x.0, axis })
    }

    /// Sum-reduce along `axis`, removing it.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.reduce_sum(x, axis, false)?;
        self.push_op("sum_axis", value, &[x.0], Op::SumAxis { input: x.0, axis })
    }

    fn reduce_sum(&self, x: NodeId, axis: usize, mean: bool) -> Result<Tensor> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::invalid(
                "reduce",
                format!("axis {} out of range for rank {}", axis, xv.rank()),
            ));
        }
        let (outer, len, inner) = outer_inner(xv.shape(), axis);
        let src = xv.data();
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= scale;
        }
        Tensor::from_vec(&reduced_shape(xv.shape(), axis), data)
    }

    /// Sum of every entry, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let total: f64 = xv.data().iter().sum();
        self.push_op("sum_all", Tensor::scalar(total), &[x.0], Op::SumAll(x.0))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::from_vec(xv.shape(), data)?;
        self.push_op(
            "leaky_relu",
            value,
            &[x.0],
            Op::LeakyRelu { input: x.0, slope },
        )
    }

    /// Inverted dropout: each entry is zeroed with probability `p`,
    /// survivors are scaled by `1/(1-p)` so the expectation is unchanged.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {} outside [0, 1)", p),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(xv.shape(), data)?;
        self.push_op("dropout", value, &[x.0], Op::Dropout { input: x.0, mask })
    }

    /// Batch normalization over the rows of an `[r, c]` matrix.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// running statistics are updated in place with the configured
    /// momentum (`new = (1 - m) * old + m * batch`, unbiased variance).
    /// In eval mode the provided running statistics are used as constants,
    /// so the output for one row never depends on the rest of the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        training: bool,
        cfg: BatchNormConfig,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("wants a rank-2 input, got {:?}", xv.shape()),
            ));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.shape() != [c] || bv.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("expects gamma/beta/running stats of length {}", c),
            ));
        }
        if cfg.eps <= 0.0 {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }

        let src = xv.data();
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            for row in src.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= r as f64;
            }
            let mut var = vec![0.0; c];
            for row in src.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            for v in &mut var {
                *v /= r as f64;
            }
            let unbias = if r > 1 { r as f64 / (r - 1) as f64 } else { 1.0 };
            for j in 0..c {
                running_mean[j] = (1.0 - cfg.momentum) * running_mean[j] + cfg.momentum * mean[j];
                running_var[j] = (1.0 - cfg.momentum) * running_var[j] + cfg.momentum * var[j] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let mut x_hat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, &v) in src.iter().enumerate() {
            let j = i % c;
            let h = (v - mean[j]) * inv_std[j];
            x_hat[i] = h;
            out[i] = gv.data()[j] * h + bv.data()[j];
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        self.push_op(
            "batch_norm",
            value,
            &[x.0, gamma.0, beta.0],
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat,
                inv_std,
                training,
            },
        )
    }

    /// Fused core of the density-adaptive convolution.
    ///
    /// `features` is `[g, k, c_in]` (grouped neighbor features), `weights`
    /// is `[g, k, c_mid]` (per-neighbor mixing weights), `kernel` is
    /// `[c_in, c_mid, c_out]`. For every group `g` and neighbor `j`:
    ///
    /// `out[g, j, co] = sum_cm w[g, j, cm] * sum_ci t[ci, cm, co] * f[g, j, ci]`
    ///
    /// The `[k, c_mid * c_out]` intermediate is never stored on the tape;
    /// the backward pass recomputes it with one extra matrix product,
    /// which keeps big training graphs inside memory.
    pub fn daconv_core(&mut self, features: NodeId, weights: NodeId, kernel: NodeId) -> Result<NodeId> {
        let fv = &self.nodes[features.0].value;
        let wv = &self.nodes[weights.0].value;
        let tv = &self.nodes[kernel.0].value;
        if fv.rank() != 3 || wv.rank() != 3 || tv.rank() != 3 {
            return Err(Error::shape(
                "daconv_core",
                format!(
                    "wants rank-3 operands, got {:?}, {:?}, {:?}",
                    fv.shape(),
                    wv.shape(),
                    tv.shape()
                ),
            ));
        }
        let (g, k, c_in) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        let (c_mid, c_out) = (tv.shape()[1], tv.shape()[2]);
        if wv.shape()[0] != g || wv.shape()[1] != k || tv.shape()[0] != c_in || wv.shape()[2] != c_mid {
            return Err(Error::shape(
                "daconv_core",
                format!(
                    "features {:?}, weights {:?}, kernel {:?} do not agree",
                    fv.shape(),
                    wv.shape(),
                    tv.shape()
                ),
            ));
        }
        let rows = g * k;
        // h[r, cm * c_out + co] = sum_ci f[r, ci] * t[ci, cm, co]
        let h = gemm::mm(fv.data(), rows, c_in, tv.data(), c_mid * c_out);
        let w = wv.data();
        let mut out = vec![0.0; rows * c_out];
        for rr in 0..rows {
            let hrow = &h[rr * c_mid * c_out..(rr + 1) * c_mid * c_out];
            let wrow = &w[rr * c_mid..(rr + 1) * c_mid];
            let orow = &mut out[rr * c_out..(rr + 1) * c_out];
            for (cm, &wv_) in wrow.iter().enumerate() {
                let hseg = &hrow[cm * c_out..(cm + 1) * c_out];
                for (o, &hv) in orow.iter_mut().zip(hseg) {
                    *o += wv_ * hv;
                }
            }
        }
        let value = Tensor::from_vec(&[g, k, c_out], out)?;
        self.push_op(
            "daconv_core",
            value,
            &[features.0, weights.0, kernel.0],
            Op::DaconvCore {
                features: features.0,
                weights: weights.0,
                kernel: kernel.0,
            },
        )
    }

    /// Reverse sweep from a scalar node. Fills `grad` for every node that
    /// `loss` depends on (transitively) and that requires gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let li = loss.0;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "target must be a scalar, got shape {:?}",
                    self.nodes[li].value.shape()
                ),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut out_index = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            out_index[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += out_index[d] * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    (out_shape, out)
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    p: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[p].requires_grad {
        return None;
    }
    Some(grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]))
}

/// Applies node `i`'s backward rule, accumulating into its parents.
fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(da) = grad_buf(grads, nodes, *a) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = grad_buf(grads, nodes, *a) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(da) = grad_buf(grads, nodes, *a) {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(x, factor) => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                let da = gemm::mm_nt(g, m, n, bv.data(), k);
                let buf = grad_buf(grads, nodes, *a).unwrap();
                for (d, v) in buf.iter_mut().zip(da) {
                    *d += v;
                }
            }
            if nodes[*b].requires_grad {
                let db = gemm::mm_tn(av.data(), m, k, g, n);
                let buf = grad_buf(grads, nodes, *b).unwrap();
                for (d, v) in buf.iter_mut().zip(db) {
                    *d += v;
                }
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *bias) {
                let c = db.len();
                for (i, &gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[i].value.shape();
            let (outer, _, inner) = outer_inner(out_shape, *axis);
            let out_block = out_shape[*axis] * inner;
            for o in 0..outer {
                let mut src = o * out_block;
                for &p in inputs {
                    let len = nodes[p].value.shape()[*axis] * inner;
                    if let Some(dp) = grad_buf(grads, nodes, p) {
                        let dst = o * len;
                        for j in 0..len {
                            dp[dst + j] += g[src + j];
                        }
                    }
                    src += len;
                }
            }
        }
        Op::SliceAxis { input, axis, start } => {
            if nodes[*input].requires_grad {
                let in_shape = nodes[*input].value.shape().to_vec();
                let len = nodes[i].value.shape()[*axis];
                let (outer, axis_len, inner) = outer_inner(&in_shape, *axis);
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        dx[dst + j] += g[src + j];
                    }
                }
            }
        }
        Op::GatherRows { input, indices } => {
            if let Some(dx) = grad_buf(grads, nodes, *input) {
                let c = nodes[*input].value.shape()[1];
                for (row, &src) in indices.iter().enumerate() {
                    let gr = &g[row * c..(row + 1) * c];
                    let dr = &mut dx[src * c..(src + 1) * c];
                    for (d, &gv) in dr.iter_mut().zip(gr) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Permute { input, perm } => {
            if nodes[*input].requires_grad {
                let out_shape = nodes[i].value.shape().to_vec();
                let mut inverse = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                let (_, back) = permute_data(&out_shape, g, &inverse);
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for (d, v) in dx.iter_mut().zip(back) {
                    *d += v;
                }
            }
        }
        Op::Reshape(input) => {
            if let Some(dx) = grad_buf(grads, nodes, *input) {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::BroadcastAxis { input, axis } => {
            if nodes[*input].requires_grad {
                let out_shape = nodes[i].value.shape().to_vec();
                let (outer, n, inner) = outer_inner(&out_shape, *axis);
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for o in 0..outer {
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        let dst = &mut dx[o * inner..(o + 1) * inner];
                        for j in 0..inner {
                            dst[j] += g[base + j];
                        }
                    }
                }
            }
        }
        Op::Softmax { input, axis } => {
            if nodes[*input].requires_grad {
                let y = nodes[i].value.data();
                let (outer, len, inner) = outer_inner(nodes[i].value.shape(), *axis);
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + j;
                        let mut dot = 0.0;
                        for a in 0..len {
                            dot += g[idx(a)] * y[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { input, axis } => {
            if nodes[*input].requires_grad {
                let y = nodes[i].value.data();
                let (outer, len, inner) = outer_inner(nodes[i].value.shape(), *axis);
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + j;
                        let mut gsum = 0.0;
                        for a in 0..len {
                            gsum += g[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] += g[idx(a)] - y[idx(a)].exp() * gsum;
                        }
                    }
                }
            }
        }
        Op::MaxPool { input, argmax, .. } => {
            if let Some(dx) = grad_buf(grads, nodes, *input) {
                for (out_i, &src) in argmax.iter().enumerate() {
                    dx[src] += g[out_i];
                }
            }
        }
        Op::AvgPool { input, axis } => {
            if nodes[*input].requires_grad {
                let in_shape = nodes[*input].value.shape().to_vec();
                let (outer, len, inner) = outer_inner(&in_shape, *axis);
                let scale = 1.0 / len as f64;
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for j in 0..inner {
                            dx[base + j] += g[o * inner + j] * scale;
                        }
                    }
                }
            }
        }
        Op::SumAxis { input, axis } => {
            if nodes[*input].requires_grad {
                let in_shape = nodes[*input].value.shape().to_vec();
                let (outer, len, inner) = outer_inner(&in_shape, *axis);
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for j in 0..inner {
                            dx[base + j] += g[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::SumAll(input) => {
            if let Some(dx) = grad_buf(grads, nodes, *input) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::LeakyRelu { input, slope } => {
            if nodes[*input].requires_grad {
                let xv = nodes[*input].value.data();
                let dx = grad_buf(grads, nodes, *input).unwrap();
                for ((d, &gv), &x) in dx.iter_mut().zip(g).zip(xv) {
                    *d += if x >= 0.0 { gv } else { slope * gv };
                }
            }
        }
        Op::Dropout { input, mask } => {
            if let Some(dx) = grad_buf(grads, nodes, *input) {
                for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
            training,
        } => {
            let c = inv_std.len();
            let r = x_hat.len() / c;
            let gamma_v = nodes[*gamma].value.data();
            // Per-channel sums of g and g * x_hat feed every term.
            let mut s1 = vec![0.0; c];
            let mut s2 = vec![0.0; c];
            for (idx, &gv) in g.iter().enumerate() {
                let j = idx % c;
                s1[j] += gv;
                s2[j] += gv * x_hat[idx];
            }
            if let Some(dg) = grad_buf(grads, nodes, *gamma) {
                for (d, &v) in dg.iter_mut().zip(&s2) {
                    *d += v;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *beta) {
                for (d, &v) in db.iter_mut().zip(&s1) {
                    *d += v;
                }
            }
            if nodes[*x].requires_grad {
                let rn = r as f64;
                let dx = grad_buf(grads, nodes, *x).unwrap();
                if *training {
                    // Batch statistics depend on x, so the mean terms
                    // appear in the gradient.
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let j = idx % c;
                        *d += gamma_v[j]
                            * inv_std[j]
                            * (g[idx] - s1[j] / rn - x_hat[idx] * s2[j] / rn);
                    }
                } else {
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let j = idx % c;
                        *d += gamma_v[j] * inv_std[j] * g[idx];
                    }
                }
            }
        }
        Op::DaconvCore {
            features,
            weights,
            kernel,
        } => {
            let fv = &nodes[*features].value;
            let wv = &nodes[*weights].value;
            let tv = &nodes[*kernel].value;
            let (gn, k, c_in) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
            let (c_mid, c_out) = (tv.shape()[1], tv.shape()[2]);
            let rows = gn * k;
            let w = wv.data();

            // dh[r, cm, co] = w[r, cm] * g[r, co]
            let mut dh = vec![0.0; rows * c_mid * c_out];
            for rr in 0..rows {
                let gr = &g[rr * c_out..(rr + 1) * c_out];
                let wr = &w[rr * c_mid..(rr + 1) * c_mid];
                let dr = &mut dh[rr * c_mid * c_out..(rr + 1) * c_mid * c_out];
                for (cm, &wv_) in wr.iter().enumerate() {
                    let seg = &mut dr[cm * c_out..(cm + 1) * c_out];
                    for (d, &gv) in seg.iter_mut().zip(gr) {
                        *d += wv_ * gv;
                    }
                }
            }
            if nodes[*features].requires_grad {
                let df = gemm::mm_nt(&dh, rows, c_mid * c_out, tv.data(), c_in);
                let buf = grad_buf(grads, nodes, *features).unwrap();
                for (d, v) in buf.iter_mut().zip(df) {
                    *d += v;
                }
            }
            if nodes[*kernel].requires_grad {
                let dt = gemm::mm_tn(fv.data(), rows, c_in, &dh, c_mid * c_out);
                let buf = grad_buf(grads, nodes, *kernel).unwrap();
                for (d, v) in buf.iter_mut().zip(dt) {
                    *d += v;
                }
            }
            if nodes[*weights].requires_grad {
                // Recompute the intermediate h for dw; not storing it on
                // the tape trades one matrix product for a lot of memory.
                let h = gemm::mm(fv.data(), rows, c_in, tv.data(), c_mid * c_out);
                let dw = grad_buf(grads, nodes, *weights).unwrap();
                for rr in 0..rows {
                    let gr = &g[rr * c_out..(rr + 1) * c_out];
                    let hrow = &h[rr * c_mid * c_out..(rr + 1) * c_mid * c_out];
                    let dwr = &mut dw[rr * c_mid..(rr + 1) * c_mid];
                    for (cm, d) in dwr.iter_mut().enumerate() {
                        let hseg = &hrow[cm * c_out..(cm + 1) * c_out];
                        let mut acc = 0.0;
                        for (&hv, &gv) in hseg.iter().zip(gr) {
                            acc += hv * gv;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
}
