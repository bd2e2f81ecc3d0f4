use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::GeometryError;

/// Triangle mesh with derived, deduplicated edge connectivity.
///
/// Edges are always rebuilt from the face list, so two meshes with the same
/// faces have identical edge tables regardless of construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    /// For each edge, the one or two faces sharing it.
    edge_faces: Vec<(usize, Option<usize>)>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        let v = vertices.len();
        for f in &faces {
            if f.iter().any(|&i| i >= v) {
                return Err(GeometryError::InvalidMesh(format!(
                    "face {:?} references vertex beyond count {}",
                    f, v
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeometryError::InvalidMesh(format!(
                    "degenerate face {:?}",
                    f
                )));
            }
        }
        if vertices
            .iter()
            .any(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(GeometryError::InvalidMesh("non-finite vertex".into()));
        }
        let (edges, edge_faces) = derive_edges(&faces)?;
        Ok(Self {
            vertices,
            faces,
            edges,
            edge_faces,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn edge_faces(&self) -> &[(usize, Option<usize>)] {
        &self.edge_faces
    }

    /// Replaces vertex positions, keeping topology. Lengths must match.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if vertices.len() != self.vertices.len() {
            return Err(GeometryError::InvalidMesh(
                "vertex count change not allowed".into(),
            ));
        }
        if vertices
            .iter()
            .any(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(GeometryError::InvalidMesh("non-finite vertex".into()));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
            edge_faces: self.edge_faces.clone(),
        })
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let ab = self.vertices[b] - self.vertices[a];
        let ac = self.vertices[c] - self.vertices[a];
        ab.cross(&ac).norm() * 0.5
    }

    /// Unnormalized face normal (cross product of two edges).
    pub fn face_normal_raw(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.faces[f];
        let ab = self.vertices[b] - self.vertices[a];
        let ac = self.vertices[c] - self.vertices[a];
        ab.cross(&ac)
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Centers at the bounding-box center and scales the bounding-box
    /// diagonal to 1 (corpus preprocessing convention).
    pub fn normalized_unit_diagonal(&self) -> Mesh {
        let (lo, hi) = self.bounding_box();
        let center = (lo + hi) * 0.5;
        let diag = (hi - lo).norm();
        let scale = if diag > 0.0 { 1.0 / diag } else { 1.0 };
        let verts = self
            .vertices
            .iter()
            .map(|p| (p - center) * scale)
            .collect();
        self.with_vertices(verts).expect("same vertex count")
    }

    /// Icosphere obtained by `level` loop subdivisions of a unit icosahedron,
    /// vertices projected back onto the unit sphere. Level 3 has 642 vertices
    /// and 1280 faces.
    pub fn icosphere(level: u32) -> Mesh {
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vector3<f64>> = vec![
            Vector3::new(-1.0, phi, 0.0),
            Vector3::new(1.0, phi, 0.0),
            Vector3::new(-1.0, -phi, 0.0),
            Vector3::new(1.0, -phi, 0.0),
            Vector3::new(0.0, -1.0, phi),
            Vector3::new(0.0, 1.0, phi),
            Vector3::new(0.0, -1.0, -phi),
            Vector3::new(0.0, 1.0, -phi),
            Vector3::new(phi, 0.0, -1.0),
            Vector3::new(phi, 0.0, 1.0),
            Vector3::new(-phi, 0.0, -1.0),
            Vector3::new(-phi, 0.0, 1.0),
        ]
        .into_iter()
        .map(|v| v.normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..level {
            let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            let mut next_faces = Vec::with_capacity(faces.len() * 4);
            for f in &faces {
                let mut mids = [0usize; 3];
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    let key = (a.min(b), a.max(b));
                    mids[k] = *midpoint.entry(key).or_insert_with(|| {
                        let m = ((vertices[a] + vertices[b]) * 0.5).normalize();
                        vertices.push(m);
                        vertices.len() - 1
                    });
                }
                next_faces.push([f[0], mids[0], mids[2]]);
                next_faces.push([f[1], mids[1], mids[0]]);
                next_faces.push([f[2], mids[2], mids[1]]);
                next_faces.push([mids[0], mids[1], mids[2]]);
            }
            faces = next_faces;
        }
        Mesh::new(vertices, faces).expect("icosphere construction is valid")
    }
}

/// Closest point on triangle `(a, b, c)` to `p`, with its barycentric
/// coordinates. Region classification follows Ericson, "Real-Time Collision
/// Detection", section 5.1.5.
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> (Vector3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + v * ab, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + w * ac, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + w * (c - b), [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

fn derive_edges(
    faces: &[[usize; 3]],
) -> Result<(Vec<[usize; 2]>, Vec<(usize, Option<usize>)>), GeometryError> {
    let mut table: BTreeMap<[usize; 2], (usize, Option<usize>)> = BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = [a.min(b), a.max(b)];
            match table.get_mut(&key) {
                None => {
                    table.insert(key, (fi, None));
                }
                Some((_, second @ None)) => *second = Some(fi),
                Some(_) => {
                    return Err(GeometryError::InvalidMesh(format!(
                        "edge {:?} shared by more than two faces",
                        key
                    )))
                }
            }
        }
    }
    let mut edges = Vec::with_capacity(table.len());
    let mut edge_faces = Vec::with_capacity(table.len());
    for (e, fs) in table {
        edges.push(e);
        edge_faces.push(fs);
    }
    Ok((edges, edge_faces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        let m = Mesh::icosphere(0);
        assert_eq!(m.vertices().len(), 12);
        assert_eq!(m.faces().len(), 20);
        assert_eq!(m.edges().len(), 30);
        let m = Mesh::icosphere(3);
        assert_eq!(m.vertices().len(), 642);
        assert_eq!(m.faces().len(), 1280);
    }

    #[test]
    fn closed_manifold_edges_have_two_faces() {
        let m = Mesh::icosphere(1);
        assert!(m.edge_faces().iter().all(|(_, second)| second.is_some()));
        // Euler characteristic of a sphere: V - E + F = 2.
        let chi =
            m.vertices().len() as i64 - m.edges().len() as i64 + m.faces().len() as i64;
        assert_eq!(chi, 2);
    }

    #[test]
    fn edge_rebuild_is_idempotent() {
        let m = Mesh::icosphere(1);
        let rebuilt = Mesh::new(m.vertices().to_vec(), m.faces().to_vec()).unwrap();
        assert_eq!(m.edges(), rebuilt.edges());
        assert_eq!(m.edge_faces(), rebuilt.edge_faces());
    }

    #[test]
    fn rejects_out_of_range_face() {
        let verts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        assert!(Mesh::new(verts, vec![[0, 1, 3]]).is_err());
    }

    #[test]
    fn triangle_projection_regions() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(2.0, 0.0, 0.0);
        let c = Vector3::new(0.0, 2.0, 0.0);
        // interior, straight down
        let (p, w) = closest_point_on_triangle(&Vector3::new(0.5, 0.5, 3.0), &a, &b, &c);
        assert!((p - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-12);
        assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-12);
        // vertex region
        let (p, w) = closest_point_on_triangle(&Vector3::new(-1.0, -1.0, 0.0), &a, &b, &c);
        assert_eq!(p, a);
        assert_eq!(w, [1.0, 0.0, 0.0]);
        // edge ab region
        let (p, _) = closest_point_on_triangle(&Vector3::new(1.0, -1.0, 0.0), &a, &b, &c);
        assert!((p - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        // hypotenuse region
        let (p, w) = closest_point_on_triangle(&Vector3::new(2.0, 2.0, 0.0), &a, &b, &c);
        assert!((p - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert!(w[0].abs() < 1e-12);
    }

    #[test]
    fn triangle_projection_matches_dense_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let rv = |rng: &mut rand_chacha::ChaCha8Rng| {
                Vector3::new(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                )
            };
            let (a, b, c) = (rv(&mut rng), rv(&mut rng), rv(&mut rng));
            let q = rv(&mut rng) * 2.0;
            let (p, w) = closest_point_on_triangle(&q, &a, &b, &c);
            let recon = w[0] * a + w[1] * b + w[2] * c;
            assert!((p - recon).norm() < 1e-10);
            // no barycentric grid point on the triangle does better
            let d = (p - q).norm();
            let n = 60;
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                    let cand = u * a + v * b + (1.0 - u - v) * c;
                    assert!((cand - q).norm() >= d - 1e-9);
                }
            }
        }
    }

    #[test]
    fn unit_diagonal_normalization() {
        let m = Mesh::icosphere(1);
        let scaled = m
            .with_vertices(m.vertices().iter().map(|v| v * 3.0 + Vector3::new(1.0, 2.0, 3.0)).collect())
            .unwrap();
        let n = scaled.normalized_unit_diagonal();
        let (lo, hi) = n.bounding_box();
        assert!(((hi - lo).norm() - 1.0).abs() < 1e-12);
        assert!((lo + hi).norm() < 1e-12);
    }
}
