//! Exact k-th nearest neighbour distances.
//!
//! A kd-tree answers queries for `d <= 16`; above that a brute-force scan is
//! used. Both paths compute squared distances with [`sq_dist`] in the same
//! coordinate order, so their results agree bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dimension above which the kd-tree is skipped.
pub const KD_TREE_MAX_DIM: usize = 16;

const LEAF_SIZE: usize = 12;

/// `n` points in `d` dimensions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    data: Vec<f64>,
    n: usize,
    dim: usize,
}

impl SampleCloud {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("sample dimension must be at least 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("samples must be finite"));
        }
        Ok(Self {
            n: data.len() / dim,
            data,
            dim,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, dim)
    }

    /// One-dimensional cloud.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), 1)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Column-wise concatenation `[self | other]` of paired samples.
    pub fn join(&self, other: &SampleCloud) -> Result<SampleCloud> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        let dim = self.dim + other.dim;
        let mut data = Vec::with_capacity(self.n * dim);
        for i in 0..self.n {
            data.extend_from_slice(self.point(i));
            data.extend_from_slice(other.point(i));
        }
        Ok(SampleCloud {
            data,
            n: self.n,
            dim,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SampleCloud {
        SampleCloud {
            data: self.data.iter().map(|&v| f(v)).collect(),
            n: self.n,
            dim: self.dim,
        }
    }

    /// Rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> SampleCloud {
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(self.point(i));
        }
        SampleCloud {
            data,
            n: order.len(),
            dim: self.dim,
        }
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn check_k(points: &SampleCloud, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.len() < k + 1 {
        return Err(Error::TooFewSamples {
            n: points.len(),
            k,
            needed: k + 1,
        });
    }
    Ok(())
}

/// Euclidean distance from each point to its k-th nearest other point.
pub fn knn_radius(points: &SampleCloud, k: usize) -> Result<Vec<f64>> {
    check_k(points, k)?;
    if points.dim() > KD_TREE_MAX_DIM {
        return brute_force_knn_radius(points, k);
    }
    let tree = KdTree::build(points);
    Ok((0..points.len())
        .into_par_iter()
        .map(|i| tree.kth_sq_dist(i, k).sqrt())
        .collect())
}

/// O(n^2) scan.
pub fn brute_force_knn_radius(points: &SampleCloud, k: usize) -> Result<Vec<f64>> {
    check_k(points, k)?;
    Ok((0..points.len())
        .into_par_iter()
        .map(|i| {
            let q = points.point(i);
            let mut heap = KBest::new(k);
            for j in 0..points.len() {
                if j != i {
                    heap.offer(sq_dist(q, points.point(j)));
                }
            }
            heap.worst().sqrt()
        })
        .collect())
}

#[derive(Clone, Copy, PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// The k smallest values seen so far.
struct KBest {
    k: usize,
    heap: BinaryHeap<Dist>,
}

impl KBest {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, d: f64) {
        if self.heap.len() < self.k {
            self.heap.push(Dist(d));
        } else if d < self.heap.peek().unwrap().0 {
            self.heap.pop();
            self.heap.push(Dist(d));
        }
    }

    fn full(&self) -> bool {
        self.heap.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.heap.peek().map(|d| d.0).unwrap_or(f64::INFINITY)
    }
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

struct KdTree<'a> {
    points: &'a SampleCloud,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    fn build(points: &'a SampleCloud) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        tree.build_node(0, points.len());
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts.point(a)[axis].total_cmp(&pts.point(b)[axis])
        });
        let value = pts.point(self.order[mid])[axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let dim = self.points.dim();
        let mut best = (0, f64::NEG_INFINITY);
        for axis in 0..dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.points.point(i)[axis];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (axis, hi - lo);
            }
        }
        best.0
    }

    fn kth_sq_dist(&self, query: usize, k: usize) -> f64 {
        let mut best = KBest::new(k);
        self.search(0, query, self.points.point(query), &mut best);
        best.worst()
    }

    fn search(&self, node: usize, query: usize, q: &[f64], best: &mut KBest) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    if j != query {
                        best.offer(sq_dist(q, self.points.point(j)));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, q, best);
                if !best.full() || diff * diff <= best.worst() {
                    self.search(far, query, q, best);
                }
            }
        }
    }
}
