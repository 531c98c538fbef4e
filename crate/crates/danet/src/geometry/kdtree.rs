//! Static kd-tree for exact k-nearest-neighbor queries.
//!
//! Built once over a point set, queried many times. Results are exact
//! and apply the same candidate ordering as a brute-force scan
//! (distance, then lexicographic position, then index), including across
//! ties: subtree pruning uses a non-strict bound, so equal-distance
//! candidates on the far side are still examined.

use super::{cmp_candidates, dist2};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub(crate) struct KdTree<'a> {
    points: &'a [[f64; 3]],
    root: Option<Box<KdNode>>,
}

struct KdNode {
    index: usize,
    axis: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

/// Max-heap entry: the worst of the current k candidates sits on top.
struct Candidate {
    d2: f64,
    pos: [f64; 3],
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_candidates(self.d2, &self.pos, self.index, other.d2, &other.pos, other.index)
    }
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = build_node(points, &mut order, 0);
        KdTree { points, root }
    }

    /// Indices of the k nearest points to `query`, nearest first. The
    /// caller guarantees `1 <= k <= points.len()`.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Vec<usize> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        search(self.points, self.root.as_deref(), query, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort_unstable();
        found.into_iter().map(|c| c.index).collect()
    }
}

fn build_node(points: &[[f64; 3]], order: &mut [usize], depth: usize) -> Option<Box<KdNode>> {
    if order.is_empty() {
        return None;
    }
    let axis = depth % 3;
    // sort keys include position and index so duplicate coordinates
    // split deterministically
    order.sort_unstable_by(|&a, &b| {
        points[a][axis]
            .total_cmp(&points[b][axis])
            .then_with(|| cmp_candidates(0.0, &points[a], a, 0.0, &points[b], b))
    });
    let mid = order.len() / 2;
    let index = order[mid];
    let (left, rest) = order.split_at_mut(mid);
    let right = &mut rest[1..];
    Some(Box::new(KdNode {
        index,
        axis,
        left: build_node(points, left, depth + 1),
        right: build_node(points, right, depth + 1),
    }))
}

fn search(
    points: &[[f64; 3]],
    node: Option<&KdNode>,
    query: [f64; 3],
    k: usize,
    heap: &mut BinaryHeap<Candidate>,
) {
    let Some(node) = node else { return };
    let pos = points[node.index];
    let cand = Candidate {
        d2: dist2(pos, query),
        pos,
        index: node.index,
    };
    if heap.len() < k {
        heap.push(cand);
    } else if cand < *heap.peek().unwrap() {
        heap.pop();
        heap.push(cand);
    }

    let diff = query[node.axis] - pos[node.axis];
    let (near, far) = if diff < 0.0 {
        (node.left.as_deref(), node.right.as_deref())
    } else {
        (node.right.as_deref(), node.left.as_deref())
    };
    search(points, near, query, k, heap);
    // non-strict: an equal-distance point beyond the plane can still win
    // its tie on position order
    if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
        search(points, far, query, k, heap);
    }
}
