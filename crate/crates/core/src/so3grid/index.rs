//! Exact nearest-rotation search over a fixed rotation set.
//!
//! Rotations are points on the unit 3-sphere; the nearest rotation to `q`
//! is the stored point maximizing `|⟨q, p⟩|`, i.e. the Euclidean nearest
//! neighbour of either `q` or `−q`. A 4-d k-d tree over the canonical
//! quaternions answers both searches. Candidates are compared with exactly
//! the same `abs_dot` expression as the linear scan and ties go to the
//! lowest index, so the two paths always agree.

use crate::rotation::Rotation;

const LEAF_SIZE: usize = 8;
const PRUNE_SLACK: f64 = 1e-12;

#[derive(Debug)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { dim: u8, value: f64, left: u32, right: u32 },
}

#[derive(Debug)]
pub struct RotationIndex {
    order: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy)]
struct Best {
    dot: f64,
    idx: u32,
}

impl Best {
    #[inline]
    fn offer(&mut self, dot: f64, idx: u32) {
        if dot > self.dot || (dot == self.dot && idx < self.idx) {
            self.dot = dot;
            self.idx = idx;
        }
    }
}

impl RotationIndex {
    pub fn build(points: &[Rotation]) -> Self {
        assert!(points.len() < u32::MAX as usize);
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(points, &mut order, 0, &mut nodes);
        }
        Self { order, nodes }
    }

    /// Index of the nearest point, ties to the lowest index. `None` when empty.
    pub fn nearest(&self, points: &[Rotation], query: &Rotation) -> Option<usize> {
        self.nearest_excluding(points, query, None)
    }

    pub fn nearest_excluding(
        &self,
        points: &[Rotation],
        query: &Rotation,
        exclude: Option<usize>,
    ) -> Option<usize> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = Best {
            dot: f64::NEG_INFINITY,
            idx: u32::MAX,
        };
        let q = query.quaternion();
        let neg = q.map(|c| -c);
        let skip = exclude.map(|e| e as u32).unwrap_or(u32::MAX);
        for target in [q, neg] {
            self.search(0, points, query, &target, skip, &mut best);
        }
        (best.idx != u32::MAX).then_some(best.idx as usize)
    }

    /// Every stored point with `|⟨q, p⟩| >= min_abs_dot`, in ascending index order.
    pub fn within(&self, points: &[Rotation], query: &Rotation, min_abs_dot: f64) -> Vec<usize> {
        let mut out: Vec<u32> = Vec::new();
        if self.nodes.is_empty() {
            return Vec::new();
        }
        let q = query.quaternion();
        let neg = q.map(|c| -c);
        for target in [q, neg] {
            self.collect(0, points, query, &target, min_abs_dot, &mut out);
        }
        out.sort_unstable();
        out.dedup();
        out.into_iter().map(|i| i as usize).collect()
    }

    fn collect(
        &self,
        node: usize,
        points: &[Rotation],
        query: &Rotation,
        target: &[f64; 4],
        min_dot: f64,
        out: &mut Vec<u32>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start as usize..end as usize] {
                    if query.abs_dot(&points[i as usize]) >= min_dot {
                        out.push(i);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = target[dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.collect(near as usize, points, query, target, min_dot, out);
                if 1.0 - 0.5 * diff * diff >= min_dot - PRUNE_SLACK {
                    self.collect(far as usize, points, query, target, min_dot, out);
                }
            }
        }
    }

    fn search(
        &self,
        node: usize,
        points: &[Rotation],
        query: &Rotation,
        target: &[f64; 4],
        skip: u32,
        best: &mut Best,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start as usize..end as usize] {
                    if i != skip {
                        best.offer(query.abs_dot(&points[i as usize]), i);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = target[dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near as usize, points, query, target, skip, best);
                // points across the plane are at least |diff| away in R^4
                let bound = 1.0 - 0.5 * diff * diff;
                if bound >= best.dot - PRUNE_SLACK {
                    self.search(far as usize, points, query, target, skip, best);
                }
            }
        }
    }
}

fn build_node(points: &[Rotation], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for &i in order.iter() {
        let q = points[i as usize].quaternion();
        for k in 0..4 {
            lo[k] = lo[k].min(q[k]);
            hi[k] = hi[k].max(q[k]);
        }
    }
    let dim = (0..4)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize].quaternion()[dim].total_cmp(&points[b as usize].quaternion()[dim])
    });
    let value = points[order[mid] as usize].quaternion()[dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build_node(points, l, offset, nodes);
    let right = build_node(points, r, offset + mid, nodes);
    nodes[id as usize] = Node::Split {
        dim: dim as u8,
        value,
        left,
        right,
    };
    id
}

/// Reference linear scan with the same tie rule as [`RotationIndex`].
pub fn nearest_linear(points: &[Rotation], query: &Rotation) -> Option<usize> {
    let mut best = Best {
        dot: f64::NEG_INFINITY,
        idx: u32::MAX,
    };
    for (i, p) in points.iter().enumerate() {
        best.offer(query.abs_dot(p), i as u32);
    }
    (best.idx != u32::MAX).then_some(best.idx as usize)
}
