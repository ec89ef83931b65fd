//! Exact k-nearest-neighbor queries over 3D points with a static k-d tree.
//!
//! Candidates are ordered by `(squared distance, index)`, so ties always
//! resolve to the smaller index and results are reproducible.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::mesh::Point3;

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Point3],
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build(points, &mut order, 0, &mut nodes);
        Self {
            points,
            nodes,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point to `q`; `None` on an empty tree.
    pub fn nearest(&self, q: &Point3) -> Option<Neighbor> {
        self.knn(q, 1, None).into_iter().next()
    }

    /// The `k` nearest points to `q` in ascending `(dist2, index)` order,
    /// optionally skipping one index (the query itself).
    pub fn knn(&self, q: &Point3, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            if let Some(root) = self.root {
                self.search(root, q, k, exclude, &mut heap);
            }
        }
        heap.into_sorted_vec()
    }

    fn search(
        &self,
        node: usize,
        q: &Point3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        if exclude != Some(n.point) {
            let cand = Neighbor {
                dist2: dist2(q, p),
                index: n.point,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(cand);
            }
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, q, k, exclude, heap);
        }
        if let Some(c) = far {
            // `<=` keeps equal-distance candidates with smaller indices reachable
            let visit = heap.len() < k || diff * diff <= heap.peek().expect("nonempty").dist2;
            if visit {
                self.search(c, q, k, exclude, heap);
            }
        }
    }
}

fn build(points: &[Point3], order: &mut [usize], depth: usize, nodes: &mut Vec<Node>) -> Option<usize> {
    if order.is_empty() {
        return None;
    }
    let axis = depth % 3;
    order.sort_unstable_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let mid = order.len() / 2;
    let id = nodes.len();
    nodes.push(Node {
        point: order[mid],
        axis,
        left: None,
        right: None,
    });
    let (lo, rest) = order.split_at_mut(mid);
    let hi = &mut rest[1..];
    let left = build(points, lo, depth + 1, nodes);
    let right = build(points, hi, depth + 1, nodes);
    nodes[id].left = left;
    nodes[id].right = right;
    Some(id)
}

/// For each point, the indices of its `k` nearest other points.
pub fn knn_indices(points: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k >= points.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} needs more than {} points",
            points.len()
        )));
    }
    let tree = KdTree::new(points);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| tree.knn(p, k, Some(i)).into_iter().map(|n| n.index).collect())
        .collect())
}

/// Row-major `n * k` flattening of [`knn_indices`].
pub fn knn_flat(points: &[Point3], k: usize) -> Result<Vec<usize>> {
    Ok(knn_indices(points, k)?.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Point3], k: usize) -> Vec<Vec<usize>> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut all: Vec<Neighbor> = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, q)| Neighbor {
                        dist2: dist2(p, q),
                        index: j,
                    })
                    .collect();
                all.sort();
                all.into_iter().take(k).map(|n| n.index).collect()
            })
            .collect()
    }

    #[test]
    fn unit_square_corners() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let nn = knn_indices(&pts, 2).unwrap();
        assert_eq!(nn[0], vec![1, 3]);
        assert_eq!(nn[1], vec![0, 2]);
        assert_eq!(nn[2], vec![1, 3]);
        assert_eq!(nn[3], vec![0, 2]);
    }

    #[test]
    fn two_points() {
        let pts = [[0.0; 3], [1.0, 2.0, 3.0]];
        assert_eq!(knn_indices(&pts, 1).unwrap(), vec![vec![1], vec![0]]);
    }

    #[test]
    fn k_too_large() {
        let pts = [[0.0; 3], [1.0, 2.0, 3.0]];
        assert!(knn_indices(&pts, 2).is_err());
    }

    #[test]
    fn matches_brute_force_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3> = (0..200)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        assert_eq!(knn_indices(&pts, 16).unwrap(), brute(&pts, 16));
    }

    #[test]
    fn ties_on_a_grid() {
        // integer lattice: many equal distances
        let mut pts = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..3 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        for k in [1, 6, 12, 30] {
            assert_eq!(knn_indices(&pts, k).unwrap(), brute(&pts, k), "k={k}");
        }
    }
}
