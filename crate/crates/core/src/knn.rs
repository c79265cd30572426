//! Exact k-nearest-neighbor search and soft (softmax) correspondence weights.
//!
//! The KD-tree order is fully deterministic: neighbors come back sorted by
//! squared distance, ties broken by the lower point index, so results are
//! identical to a brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::autodiff::Real;
use crate::geometry::{Point3, PointCloud};

/// Floor applied to target weights before they divide a distance.
pub const WEIGHT_FLOOR: f64 = 1e-3;

pub const DEFAULT_K_D: usize = 4;

/// Neighbor count up to which per-query buffers stay on the stack.
pub(crate) const SMALL_K: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnnError {
    #[error("cannot index an empty cloud")]
    EmptyCloud,
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry(Neighbor);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        neighbor_order(&self.0, &other.0)
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index))
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Balanced KD-tree over a snapshot of a cloud's points.
#[derive(Debug, Clone)]
pub struct KdIndex {
    points: Vec<[f64; 3]>,
    // point indices, permuted so each leaf owns a contiguous range
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

impl KdIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self, KnnError> {
        Self::with_leaf_size(cloud, 12)
    }

    pub fn with_leaf_size(cloud: &PointCloud, leaf_size: usize) -> Result<Self, KnnError> {
        Self::from_points(cloud.points(), leaf_size)
    }

    pub fn from_points(points: &[Point3], leaf_size: usize) -> Result<Self, KnnError> {
        if points.is_empty() {
            return Err(KnnError::EmptyCloud);
        }
        let mut index = Self {
            points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size: leaf_size.max(1),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the widest axis at the median
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for d in 0..3 {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let dim = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if hi[dim] - lo[dim] == 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][dim].total_cmp(&pts[b][dim]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Point3 {
        let p = self.points[i];
        Point3::new(p[0], p[1], p[2])
    }

    /// The `min(k, n)` nearest points, sorted by (distance, index).
    pub fn query(&self, query: &Point3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, &q, k, &mut heap);
        let mut out: Vec<Neighbor> = heap.into_iter().map(|e| e.0).collect();
        out.sort_unstable_by(neighbor_order);
        out
    }

    fn offer(heap: &mut BinaryHeap<HeapEntry>, k: usize, n: Neighbor) {
        if heap.len() < k {
            heap.push(HeapEntry(n));
        } else if neighbor_order(&n, &heap.peek().unwrap().0) == Ordering::Less {
            heap.pop();
            heap.push(HeapEntry(n));
        }
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<HeapEntry>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    Self::offer(
                        heap,
                        k,
                        Neighbor {
                            index: i,
                            dist2: dist2(q, &self.points[i]),
                        },
                    );
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // equal distances must still be visited for the index tie rule
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0.dist2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Neighbors with their softmax correspondence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftNeighbors {
    pub neighbor_indices: Vec<usize>,
    pub knn_weights: Vec<f64>,
}

/// Softmax of negated (scaled) distances; `weights[j] = exp(-s_j) / sum exp(-s_k)`
/// with `s_j = dist_j / (temperature * max(w_j, WEIGHT_FLOOR))`.
///
/// The smallest scaled distance is subtracted (as a constant) before
/// exponentiation, which leaves values and derivatives unchanged.
pub fn softmax_weights<S: Real>(dists: &[S], target_weights: Option<&[S]>, temperature: f64) -> Vec<S> {
    let mut e: Vec<S> = dists
        .iter()
        .enumerate()
        .map(|(j, &d)| scaled_distance(d, target_weights.map(|w| w[j]), temperature))
        .collect();
    softmax_in_place(&mut e);
    e
}

/// `d / (temperature * max(w, WEIGHT_FLOOR))`, or `d / temperature` without a weight.
#[inline]
pub(crate) fn scaled_distance<S: Real>(d: S, weight: Option<S>, temperature: f64) -> S {
    match weight {
        Some(w) => d / (w.max_floor(WEIGHT_FLOOR) * temperature),
        None => d / temperature,
    }
}

/// Replaces scaled distances with their softmax weights.
pub(crate) fn softmax_in_place<S: Real>(e: &mut [S]) {
    if e.len() == 1 {
        e[0] = S::constant(1.0);
        return;
    }
    let shift = e.iter().map(|s| s.value()).fold(f64::INFINITY, f64::min);
    for x in e.iter_mut() {
        *x = (-(*x - shift)).exp();
    }
    let total = S::sum(e);
    for x in e.iter_mut() {
        *x = *x / total;
    }
}

pub fn soft_knn(index: &KdIndex, query: &Point3, k_d: usize) -> Result<SoftNeighbors, KnnError> {
    soft_knn_impl(index, query, k_d, None, 1.0)
}

pub fn soft_knn_with_temperature(
    index: &KdIndex,
    query: &Point3,
    k_d: usize,
    temperature: f64,
) -> Result<SoftNeighbors, KnnError> {
    soft_knn_impl(index, query, k_d, None, temperature)
}

/// Like [`soft_knn`], with each neighbor's distance divided by its weight.
pub fn soft_knn_weighted(
    index: &KdIndex,
    query: &Point3,
    k_d: usize,
    target_weights: &[f64],
) -> Result<SoftNeighbors, KnnError> {
    soft_knn_impl(index, query, k_d, Some(target_weights), 1.0)
}

fn soft_knn_impl(
    index: &KdIndex,
    query: &Point3,
    k_d: usize,
    target_weights: Option<&[f64]>,
    temperature: f64,
) -> Result<SoftNeighbors, KnnError> {
    if index.is_empty() {
        return Err(KnnError::EmptyCloud);
    }
    if k_d == 0 {
        return Err(KnnError::ZeroK);
    }
    let nb = index.query(query, k_d);
    let dists: Vec<f64> = nb.iter().map(|n| n.dist2.sqrt()).collect();
    let w: Option<Vec<f64>> = target_weights.map(|tw| nb.iter().map(|n| tw[n.index]).collect());
    Ok(SoftNeighbors {
        neighbor_indices: nb.iter().map(|n| n.index).collect(),
        knn_weights: softmax_weights(&dists, w.as_deref(), temperature),
    })
}
