//! Exact nearest-neighbor queries over a fixed set of 3D positions.
//!
//! A simple balanced k-d tree. Queries return exactly what an exhaustive
//! scan would, with ties broken toward the lowest point index so that label
//! transfer stays deterministic.

use nalgebra::Point3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;

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

/// Immutable nearest-neighbor index over a fixed point set.
///
/// Construction is single-writer; queries are read-only and safe to run
/// concurrently.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3<f64>>,
    // Point indices permuted so each leaf owns a contiguous range.
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

impl SpatialIndex {
    pub fn build(points: &[Point3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("spatial index over empty point set"));
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = build_node(points, &mut order, 0, points.len(), &mut nodes);
        Ok(SpatialIndex {
            points: points.to_vec(),
            order,
            nodes,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    /// Index and Euclidean distance of the point nearest to `query`.
    /// Equidistant candidates resolve to the lowest index.
    pub fn nearest(&self, query: &Point3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        (best.0, best.1.sqrt())
    }

    fn nearest_rec(&self, node: usize, query: &Point3<f64>, best: &mut (usize, f64)) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    let idx = idx as usize;
                    let d2 = (self.points[idx] - query).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && idx < best.0) {
                        *best = (idx, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.nearest_rec(near, query, best);
                // Equal plane distance must still be explored so that ties
                // resolve to the lowest index regardless of tree layout.
                if delta * delta <= best.1 {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }

    /// The `k` nearest points, sorted by (distance, index).
    pub fn k_nearest(&self, query: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.k_nearest_rec(self.root, query, k, &mut heap);
        let mut out: Vec<(usize, f64)> = heap
            .into_iter()
            .map(|(d2, i)| (i, d2.sqrt()))
            .collect();
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    fn k_nearest_rec(
        &self,
        node: usize,
        query: &Point3<f64>,
        k: usize,
        heap: &mut Vec<(f64, usize)>,
    ) {
        // `heap` kept as a sorted-descending vec; k is small in practice.
        let worst = |h: &Vec<(f64, usize)>| {
            if h.len() < k {
                f64::INFINITY
            } else {
                h[0].0
            }
        };
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    let idx = idx as usize;
                    let d2 = (self.points[idx] - query).norm_squared();
                    let key = (d2, idx);
                    if heap.len() < k {
                        let pos = heap.partition_point(|e| *e > key);
                        heap.insert(pos, key);
                    } else if key < heap[0] {
                        heap.remove(0);
                        let pos = heap.partition_point(|e| *e > key);
                        heap.insert(pos, key);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.k_nearest_rec(near, query, k, heap);
                if delta * delta <= worst(heap) {
                    self.k_nearest_rec(far, query, k, heap);
                }
            }
        }
    }

    /// All points within `radius` of the query, unsorted index order not
    /// guaranteed; callers sort if needed.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        self.radius_rec(self.root, query, r2, &mut out);
        out
    }

    fn radius_rec(
        &self,
        node: usize,
        query: &Point3<f64>,
        r2: f64,
        out: &mut Vec<(usize, f64)>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    let idx = idx as usize;
                    let d2 = (self.points[idx] - query).norm_squared();
                    if d2 <= r2 {
                        out.push((idx, d2.sqrt()));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.radius_rec(near, query, r2, out);
                if delta * delta <= r2 {
                    self.radius_rec(far, query, r2, out);
                }
            }
        }
    }
}

fn build_node(
    points: &[Point3<f64>],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    // Split on the widest axis at the median.
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &idx in slice.iter() {
        let p = &points[idx as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
        .unwrap();
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let value = points[slice[mid] as usize][axis];
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes.push(Node::Split {
        axis,
        value,
        left,
        right,
    });
    nodes.len() - 1
}

/// `(index, distance)` of the nearest indexed point; ties break low.
pub fn nearest_neighbor(index: &SpatialIndex, query: &Point3<f64>) -> (usize, f64) {
    index.nearest(query)
}
