//! Reverse-mode autodiff over flat `f64` buffers.
//!
//! [`Tensor`] is a plain value: a shape and a row-major data buffer.
//! Differentiable computation happens on a [`Tape`]: leaves are placed on
//! the tape, ops append nodes in topological order, and
//! [`Tape::backward`] runs one reverse sweep that visits each node once.
//!
//! The engine is deliberately small: no broadcasting rules (expansion is
//! an explicit op), no views (ops copy), ranks up to whatever the op
//! accepts. Everything is deterministic; given the same inputs the same
//! graph produces bit-identical outputs on every run.

mod checkpoint;
pub(crate) mod gemm;
mod gradcheck;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::gradient_check;
pub use tape::{BatchNormConfig, NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {:?} holds {} values, data has {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform random tensor on `[lo, hi)`, filled in row-major order.
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the tensor, returning its flat buffer.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at a fully specified index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {:?} out of bounds at axis {}", index, i);
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Reinterprets the buffer under a new shape of the same size.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("cannot view {} values as {:?}", self.data.len(), shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid("Tensor", "rank-0 shapes are not supported"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(
            "Tensor",
            format!("zero-sized dimension in shape {:?}", shape),
        ));
    }
    Ok(())
}

/// Splits `shape` at `axis` into (outer, axis length, inner) extents, so a
/// flat index decomposes as `(o * len + a) * inner + i`.
pub(crate) fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_size() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn outer_inner_decomposition() {
        assert_eq!(outer_inner(&[2, 3, 4], 0), (1, 2, 12));
        assert_eq!(outer_inner(&[2, 3, 4], 1), (2, 3, 4));
        assert_eq!(outer_inner(&[2, 3, 4], 2), (6, 4, 1));
    }
}
