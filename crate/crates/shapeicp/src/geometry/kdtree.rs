use nalgebra::Vector3;

use super::{GeometryError, PointCloud};

/// One q-nearest-neighbor hit: reference index and squared Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

/// Exact kd-tree over a fixed point set.
///
/// Ties in distance are broken by the smaller reference index, so queries are
/// fully deterministic.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut indices: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_rec(points, &mut indices[..], 0, &mut nodes);
        Self {
            points: points.to_vec(),
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

    /// Exact q nearest neighbors of `query`, sorted by ascending
    /// (distance, index).
    pub fn nearest(&self, query: &Vector3<f64>, q: usize) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(q + 1);
        if let Some(root) = self.root {
            self.search(root, query, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, query: &Vector3<f64>, q: usize, best: &mut Vec<Neighbor>) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let d2 = (query - p).norm_squared();
        insert_candidate(best, Neighbor { index: n.point, dist2: d2 }, q);

        let delta = query[n.axis] - p[n.axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(child) = near {
            self.search(child, query, q, best);
        }
        // Visit the far side unless the splitting plane is strictly farther
        // than the current worst candidate (non-strict keeps ties exact).
        let worst = best.last().map(|nb| nb.dist2).unwrap_or(f64::INFINITY);
        if let Some(child) = far {
            if best.len() < q || delta * delta <= worst {
                self.search(child, query, q, best);
            }
        }
    }
}

fn insert_candidate(best: &mut Vec<Neighbor>, cand: Neighbor, q: usize) {
    let key = (cand.dist2, cand.index);
    let pos = best
        .binary_search_by(|nb| {
            (nb.dist2, nb.index)
                .partial_cmp(&key)
                .expect("finite distances")
        })
        .unwrap_or_else(|i| i);
    if pos < q {
        best.insert(pos, cand);
        best.truncate(q);
    }
}

fn build_rec(
    points: &[Vector3<f64>],
    indices: &mut [usize],
    depth: usize,
    nodes: &mut Vec<Node>,
) -> Option<usize> {
    if indices.is_empty() {
        return None;
    }
    let axis = depth % 3;
    let mid = indices.len() / 2;
    indices.select_nth_unstable_by(mid, |&a, &b| {
        (points[a][axis], a)
            .partial_cmp(&(points[b][axis], b))
            .expect("finite coordinates")
    });
    let point = indices[mid];
    let id = nodes.len();
    nodes.push(Node {
        point,
        axis,
        left: None,
        right: None,
    });
    let (lo, hi) = indices.split_at_mut(mid);
    let left = build_rec(points, lo, depth + 1, nodes);
    let right = build_rec(points, &mut hi[1..], depth + 1, nodes);
    nodes[id].left = left;
    nodes[id].right = right;
    Some(id)
}

/// Exact q-nearest-neighbor search of every query point against `reference`.
pub fn nearest_neighbors(
    query: &PointCloud,
    reference: &PointCloud,
    q: usize,
) -> Result<Vec<Vec<Neighbor>>, GeometryError> {
    if q == 0 || reference.len() < q {
        return Err(GeometryError::EmptyReference);
    }
    let tree = KdTree::build(reference.points());
    Ok(query
        .points()
        .iter()
        .map(|p| tree.nearest(p, q))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(query: &Vector3<f64>, reference: &[Vector3<f64>], q: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = reference
            .iter()
            .enumerate()
            .map(|(i, p)| Neighbor {
                index: i,
                dist2: (query - p).norm_squared(),
            })
            .collect();
        all.sort_by(|a, b| (a.dist2, a.index).partial_cmp(&(b.dist2, b.index)).unwrap());
        all.truncate(q);
        all
    }

    #[test]
    fn single_query_hand_case() {
        let reference = PointCloud::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ])
        .unwrap();
        let query = PointCloud::new(vec![Vector3::new(0.1, 0.0, 0.0)]).unwrap();
        let hits = nearest_neighbors(&query, &reference, 1).unwrap();
        assert_eq!(hits[0][0].index, 0);
        assert!((hits[0][0].dist2 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn q_equals_reference_size() {
        let reference = PointCloud::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
        ])
        .unwrap();
        let query = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.1)]).unwrap();
        let hits = nearest_neighbors(&query, &reference, 3).unwrap();
        assert_eq!(hits[0].len(), 3);
        assert!(hits[0].windows(2).all(|w| w[0].dist2 <= w[1].dist2));
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vector3<f64>> {
            (0..n)
                .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
                .collect()
        };
        let reference_pts = pts(&mut rng, 500);
        let query_pts = pts(&mut rng, 500);
        let reference = PointCloud::new(reference_pts.clone()).unwrap();
        let query = PointCloud::new(query_pts.clone()).unwrap();
        let hits = nearest_neighbors(&query, &reference, 3).unwrap();
        for (qp, got) in query_pts.iter().zip(&hits) {
            let want = brute_force(qp, &reference_pts, 3);
            assert_eq!(got, &want);
        }
    }

    #[test]
    fn deterministic_tie_break() {
        // Two reference points equidistant from the query: lower index wins.
        let reference = PointCloud::new(vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
        ])
        .unwrap();
        let query = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        let hits = nearest_neighbors(&query, &reference, 1).unwrap();
        assert_eq!(hits[0][0].index, 0);
    }

    #[test]
    fn rejects_small_reference() {
        let reference = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        let query = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        assert!(nearest_neighbors(&query, &reference, 2).is_err());
        assert!(nearest_neighbors(&query, &reference, 0).is_err());
    }
}
