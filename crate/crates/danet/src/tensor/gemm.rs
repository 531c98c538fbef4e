//! Dense matrix products.
//!
//! Thin wrappers over `ndarray`'s `dot`, which dispatches to the packed
//! matrixmultiply kernels. Single-threaded and bit-deterministic, and an
//! order of magnitude faster than a naive triple loop, which is what makes
//! CPU training of the test networks practical.

use ndarray::{Array2, ArrayView2};

// `dot` does not promise a standard-layout result; the degenerate inner
// dimension 1 (an outer product) comes back transposed in memory, so the
// raw buffer can only be taken when the layout really is row major.
fn row_major(c: Array2<f64>) -> Vec<f64> {
    if c.is_standard_layout() {
        c.into_raw_vec_and_offset().0
    } else {
        c.iter().copied().collect()
    }
}

/// `a` is m x k, `b` is k x n; returns m x n.
pub(crate) fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm rhs shape");
    row_major(a.dot(&b))
}

/// `a` is m x k, `b` is n x k; returns `a * b^T`, m x n.
pub(crate) fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((n, k), b).expect("gemm rhs shape");
    row_major(a.dot(&b.t()))
}

/// `a` is k x m, `b` is k x n; returns `a^T * b`, m x n.
pub(crate) fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let a = ArrayView2::from_shape((k, m), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm rhs shape");
    row_major(a.t().dot(&b))
}
