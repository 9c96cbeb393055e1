//! Exact nearest-neighbor search over 3D points with a k-d tree.
//!
//! Ties in distance are broken by the lowest source index, so results match an
//! exhaustive scan exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("cannot build a search index over an empty point set")]
    EmptyCloud,
}

#[derive(Debug, Clone)]
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

/// Immutable k-d tree over a snapshot of a point set.
#[derive(Debug, Clone)]
pub struct NnIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl NnIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self, SpatialError> {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point3]) -> Result<Self, SpatialError> {
        if points.is_empty() {
            return Err(SpatialError::EmptyCloud);
        }
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(&points, &mut order, 0, points.len(), &mut nodes);
        Ok(Self {
            points,
            order,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> Point3 {
        let p = self.points[index];
        Point3::new(p[0], p[1], p[2])
    }

    /// Closest indexed point: `(source index, Euclidean distance)`.
    pub fn nearest(&self, query: &Point3) -> (usize, f64) {
        let (i, d2) = self.nearest_sq(query);
        (i, d2.sqrt())
    }

    /// Like [`nearest`](Self::nearest) but returns the squared distance.
    pub fn nearest_sq(&self, query: &Point3) -> (usize, f64) {
        let q = [query.x, query.y, query.z];
        let mut best = Candidate {
            d2: f64::INFINITY,
            index: usize::MAX,
        };
        self.search_nearest(0, &q, &mut best);
        (best.index, best.d2)
    }

    /// Nearest neighbor of every query, in query order.
    pub fn nearest_batch(&self, queries: &[Point3]) -> Vec<(usize, f64)> {
        queries.par_iter().map(|q| self.nearest_sq(q)).collect()
    }

    /// Up to `k_max` closest points within `radius` (inclusive), sorted by
    /// distance then index. `exclude` drops one source index, used when the
    /// query is itself a member of the indexed cloud.
    pub fn radius_neighbors(
        &self,
        query: &Point3,
        radius: f64,
        k_max: usize,
        exclude: Option<usize>,
    ) -> Vec<usize> {
        if k_max == 0 || !(radius > 0.0) {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap = BinaryHeap::with_capacity(k_max + 1);
        self.search_knn(0, &q, radius * radius, k_max, exclude, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.index).collect()
    }

    fn search_nearest(&self, node: usize, q: &[f64; 3], best: &mut Candidate) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        d2: dist2(&self.points[i], q),
                        index: i,
                    };
                    if c < *best {
                        *best = c;
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search_nearest(near, q, best);
                // equality must still be explored: a farther-side point at the
                // same distance may carry a lower index
                if diff * diff <= best.d2 {
                    self.search_nearest(far, q, best);
                }
            }
        }
    }

    fn search_knn(
        &self,
        node: usize,
        q: &[f64; 3],
        r2: f64,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(&self.points[i], q),
                        index: i,
                    };
                    if c.d2 > r2 {
                        continue;
                    }
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search_knn(near, q, r2, k, exclude, heap);
                let bound = if heap.len() < k {
                    r2
                } else {
                    heap.peek().map_or(r2, |c| c.d2)
                };
                if diff * diff <= bound {
                    self.search_knn(far, q, r2, k, exclude, heap);
                }
            }
        }
    }
}

fn build_node(
    points: &[[f64; 3]],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] == 0.0 {
        // all points coincide
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start, end });
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}
