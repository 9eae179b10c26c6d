use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

/// A query result: index into the indexed cloud and Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Balanced 3D k-d tree. Immutable after construction, so shared references
/// can be queried from any number of threads.
///
/// Ties on distance resolve to the smallest point index.
#[derive(Clone, Debug)]
pub struct KdIndex {
    points: Vec<Point3>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

/// (squared distance, index) with lexicographic total order.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl KdIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::new(&cloud.points)
    }

    pub fn new(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("cannot index an empty cloud"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let mut order: Vec<(Point3, usize)> =
            points.iter().copied().zip(0..).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(&mut nodes, &mut order, 0);
        let (points, ids) = order.into_iter().unzip();
        Ok(KdIndex { points, ids, nodes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The indexed point with original index `i`. O(n); for tests.
    pub fn point(&self, i: usize) -> Option<Point3> {
        self.ids.iter().position(|&id| id == i).map(|p| self.points[p])
    }

    pub fn nearest(&self, q: &Point3) -> Neighbor {
        let mut best = Candidate(f64::INFINITY, usize::MAX);
        self.nearest_rec(0, q, &mut best);
        Neighbor {
            index: best.1,
            distance: best.0.sqrt(),
        }
    }

    fn nearest_rec(&self, node: usize, q: &Point3, best: &mut Candidate) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let c = Candidate(q.dist2(&self.points[i]), self.ids[i]);
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
                let diff = q.coord(axis as usize) - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near as usize, q, best);
                if diff * diff <= best.0 {
                    self.nearest_rec(far as usize, q, best);
                }
            }
        }
    }

    /// The `k` nearest points in ascending (distance, index) order.
    /// `k` is clamped to the cloud size.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, q, k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|Candidate(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn knn_rec(&self, node: usize, q: &Point3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let c = Candidate(q.dist2(&self.points[i]), self.ids[i]);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
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
                let diff = q.coord(axis as usize) - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near as usize, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.knn_rec(far as usize, q, k, heap);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), sorted by index.
    pub fn within_radius(&self, q: &Point3, radius: f64) -> Vec<Neighbor> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.radius_rec(0, q, r2, &mut out);
        out.sort_unstable_by_key(|c| c.1);
        out.into_iter()
            .map(|Candidate(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn radius_rec(&self, node: usize, q: &Point3, r2: f64, out: &mut Vec<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let d2 = q.dist2(&self.points[i]);
                    if d2 <= r2 {
                        out.push(Candidate(d2, self.ids[i]));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q.coord(axis as usize) - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_rec(near as usize, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_rec(far as usize, q, r2, out);
                }
            }
        }
    }

    /// Indices of all points whose horizontal distance to `(cx, cy)` is at
    /// most `radius`, z unbounded. Sorted ascending.
    pub fn within_cylinder(&self, cx: f64, cy: f64, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.cylinder_rec(0, cx, cy, r2, &mut out);
        out.sort_unstable();
        out
    }

    fn cylinder_rec(&self, node: usize, cx: f64, cy: f64, r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    if self.points[i].dist2_xy(cx, cy) <= r2 {
                        out.push(self.ids[i]);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                if axis == 2 {
                    self.cylinder_rec(left as usize, cx, cy, r2, out);
                    self.cylinder_rec(right as usize, cx, cy, r2, out);
                    return;
                }
                let diff = if axis == 0 { cx } else { cy } - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.cylinder_rec(near as usize, cx, cy, r2, out);
                if diff * diff <= r2 {
                    self.cylinder_rec(far as usize, cx, cy, r2, out);
                }
            }
        }
    }
}

fn build_node(nodes: &mut Vec<Node>, items: &mut [(Point3, usize)], offset: usize) -> u32 {
    let id = nodes.len() as u32;
    if items.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + items.len()) as u32,
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in items.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(p.coord(a));
            hi[a] = hi[a].max(p.coord(a));
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap();
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| {
        a.0.coord(axis).total_cmp(&b.0.coord(axis)).then(a.1.cmp(&b.1))
    });
    let value = items[mid].0.coord(axis);
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = items.split_at_mut(mid);
    let left = build_node(nodes, l, offset);
    let right = build_node(nodes, r, offset + mid);
    nodes[id as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    id
}
