use std::collections::BinaryHeap;

use crate::geometry::Vec3;

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

/// Static k-d tree over a point set. Results are `(index, squared distance)`
/// sorted by distance, ties by index. Duplicate points are allowed.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn sorted(mut hits: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    hits
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build(0, points.len());
        }
        index
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let (lo, hi) = self.order[start..end].iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), &i| (lo.inf(&self.points[i]), hi.sup(&self.points[i])),
        );
        let extent = hi - lo;
        let axis = extent.imax();
        if extent[axis] <= 0.0 {
            // all points coincide
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest_k(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_recurse(0, query, k, &mut heap);
        sorted(heap.into_iter().map(|Candidate(d, i)| (i, d)).collect())
    }

    fn knn_recurse(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate((self.points[i] - q).norm_squared(), i);
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
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_recurse(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.knn_recurse(far, q, k, heap);
                }
            }
        }
    }

    pub fn nearest(&self, query: &Vec3) -> Option<(usize, f64)> {
        self.nearest_k(query, 1).into_iter().next()
    }

    /// All points within Euclidean `radius` of `query`.
    pub fn within(&self, query: &Vec3, radius: f64) -> Vec<(usize, f64)> {
        let mut hits = Vec::new();
        if !self.is_empty() && radius >= 0.0 {
            self.within_recurse(0, query, radius * radius, &mut hits);
        }
        sorted(hits)
    }

    fn within_recurse(&self, node: usize, q: &Vec3, r2: f64, hits: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d <= r2 {
                        hits.push((i, d));
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
                self.within_recurse(near, q, r2, hits);
                if diff * diff <= r2 {
                    self.within_recurse(far, q, r2, hits);
                }
            }
        }
    }
}
