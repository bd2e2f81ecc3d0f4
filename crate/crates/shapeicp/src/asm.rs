//! Category-level mesh-based active shape models: PCA over deformed-template
//! vertex vectors, shape-code reconstruction with analytic Jacobians, and the
//! `SASM1` binary persistence format.

use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::geometry::{GeometryError, Mesh, PointCloud, Sim3Pose};
use crate::meshfit::SurfaceSamples;

#[derive(Debug, Error)]
pub enum AsmError {
    #[error("meshes do not share the template topology")]
    TopologyMismatch,
    #[error("requested {k} bases but only {max} are available")]
    KTooLarge { k: usize, max: usize },
    #[error("shape code has length {got}, model expects {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("model stores no training codes")]
    NoStoredCodes,
    #[error("need at least 2 meshes to build a shape model")]
    TooFewMeshes,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad SASM1 data: {0}")]
    Format(String),
}

/// PCA weight vector parameterizing one shape instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCode(pub DVector<f64>);

impl ShapeCode {
    pub fn zeros(k: usize) -> Self {
        Self(DVector::zeros(k))
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(DVector::from_vec(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Linear statistical shape model: mean vertex vector plus K orthonormal
/// basis displacement fields, with the template topology and the fitted codes
/// of every training model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveShapeModel {
    category: String,
    /// Flattened mean vertices, length 3V (x0 y0 z0 x1 ...).
    mean: DVector<f64>,
    /// K x 3V, rows are orthonormal basis vectors.
    bases: DMatrix<f64>,
    singular_values: Vec<f64>,
    /// U x K projected training codes.
    training_codes: Vec<DVector<f64>>,
    faces: Vec<[usize; 3]>,
}

fn flatten_vertices(mesh: &Mesh) -> DVector<f64> {
    let mut v = DVector::zeros(mesh.vertices().len() * 3);
    for (i, p) in mesh.vertices().iter().enumerate() {
        v[3 * i] = p.x;
        v[3 * i + 1] = p.y;
        v[3 * i + 2] = p.z;
    }
    v
}

fn unflatten_vertices(v: &DVector<f64>) -> Vec<Vector3<f64>> {
    (0..v.len() / 3)
        .map(|i| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
        .collect()
}

/// PCA over the flattened vertex vectors of topologically identical meshes.
///
/// Uses a thin SVD of the centered U x 3V data matrix. Basis signs follow a
/// deterministic convention: the largest-magnitude component of each basis is
/// positive (first such component on ties).
pub fn build_asm(
    category: &str,
    deformed_templates: &[Mesh],
    k: usize,
) -> Result<ActiveShapeModel, AsmError> {
    let u_count = deformed_templates.len();
    if u_count < 2 {
        return Err(AsmError::TooFewMeshes);
    }
    let first = &deformed_templates[0];
    for m in deformed_templates {
        if m.faces() != first.faces() || m.vertices().len() != first.vertices().len() {
            return Err(AsmError::TopologyMismatch);
        }
    }
    if k == 0 || k > u_count - 1 {
        return Err(AsmError::KTooLarge {
            k,
            max: u_count - 1,
        });
    }

    let dim = first.vertices().len() * 3;
    let rows: Vec<DVector<f64>> = deformed_templates.iter().map(flatten_vertices).collect();
    let mut mean = DVector::zeros(dim);
    for r in &rows {
        mean += r;
    }
    mean /= u_count as f64;

    let mut data = DMatrix::zeros(u_count, dim);
    for (i, r) in rows.iter().enumerate() {
        data.set_row(i, &(r - &mean).transpose());
    }
    // Thin SVD through the U x U Gram matrix: far more accurate than a
    // direct decomposition of the wide U x 3V matrix and exact for U << 3V.
    // Right singular vectors are data^T u_r / sigma_r.
    let gram = &data * data.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..u_count).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut bases = DMatrix::zeros(k, dim);
    let mut singular_values = Vec::with_capacity(k);
    for (row, &r) in order.iter().take(k).enumerate() {
        let sigma = eig.eigenvalues[r].max(0.0).sqrt();
        let u_vec: DVector<f64> = eig.eigenvectors.column(r).into();
        let mut b: DVector<f64> = data.transpose() * u_vec;
        let norm = b.norm();
        if norm > 0.0 {
            b /= norm;
        }
        // Re-orthonormalize against earlier bases; keeps near-null
        // directions of a rank-deficient corpus numerically orthonormal.
        for prev in 0..row {
            let dot = bases.row(prev).transpose().dot(&b);
            b -= dot * bases.row(prev).transpose();
        }
        let norm = b.norm();
        if norm > 0.0 {
            b /= norm;
        }
        let mut max_idx = 0;
        for i in 0..dim {
            if b[i].abs() > b[max_idx].abs() {
                max_idx = i;
            }
        }
        if b[max_idx] < 0.0 {
            b = -b;
        }
        bases.set_row(row, &b.transpose());
        singular_values.push(sigma);
    }

    let training_codes = rows
        .iter()
        .map(|r| &bases * (r - &mean))
        .collect();

    Ok(ActiveShapeModel {
        category: category.to_string(),
        mean,
        bases,
        singular_values,
        training_codes,
        faces: first.faces().to_vec(),
    })
}

impl ActiveShapeModel {
    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn basis_count(&self) -> usize {
        self.bases.nrows()
    }

    pub fn training_count(&self) -> usize {
        self.training_codes.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn mean_vector(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn bases(&self) -> &DMatrix<f64> {
        &self.bases
    }

    pub fn training_code(&self, u: usize) -> ShapeCode {
        ShapeCode(self.training_codes[u].clone())
    }

    fn check_code(&self, code: &ShapeCode) -> Result<(), AsmError> {
        if code.len() != self.basis_count() {
            return Err(AsmError::LengthMismatch {
                got: code.len(),
                want: self.basis_count(),
            });
        }
        Ok(())
    }

    /// Vertices `b0 + sum_k c_k b_k` with the template topology.
    pub fn reconstruct(&self, code: &ShapeCode) -> Result<Mesh, AsmError> {
        self.check_code(code)?;
        let flat = &self.mean + self.bases.transpose() * &code.0;
        Ok(Mesh::new(unflatten_vertices(&flat), self.faces.clone())?)
    }

    /// Surface points from fixed barycentric samples, plus the per-point
    /// 3 x K Jacobian with respect to the shape code. The model is linear, so
    /// the Jacobian is constant in the code.
    pub fn sample_points_with_jacobian(
        &self,
        samples: &SurfaceSamples,
        code: &ShapeCode,
    ) -> Result<(PointCloud, Vec<DMatrix<f64>>), AsmError> {
        self.check_code(code)?;
        let k = self.basis_count();
        let mut points = Vec::with_capacity(samples.len());
        let mut jacobians = Vec::with_capacity(samples.len());
        for (n, &f) in samples.face_indices().iter().enumerate() {
            if f >= self.faces.len() {
                return Err(AsmError::TopologyMismatch);
            }
            let w = samples.barycentric_weights()[n];
            let idx = self.faces[f];
            let mut p = Vector3::zeros();
            let mut jac = DMatrix::zeros(3, k);
            for corner in 0..3 {
                let vi = idx[corner];
                let gamma = w[corner];
                let base = Vector3::new(
                    self.mean[3 * vi],
                    self.mean[3 * vi + 1],
                    self.mean[3 * vi + 2],
                );
                p += gamma * base;
                for kk in 0..k {
                    let bk = Vector3::new(
                        self.bases[(kk, 3 * vi)],
                        self.bases[(kk, 3 * vi + 1)],
                        self.bases[(kk, 3 * vi + 2)],
                    );
                    p += gamma * code.0[kk] * bk;
                    jac[(0, kk)] += gamma * bk.x;
                    jac[(1, kk)] += gamma * bk.y;
                    jac[(2, kk)] += gamma * bk.z;
                }
            }
            points.push(p);
            jacobians.push(jac);
        }
        Ok((PointCloud::new(points)?, jacobians))
    }

    /// Arithmetic mean of the stored training codes.
    pub fn mean_code(&self) -> Result<ShapeCode, AsmError> {
        if self.training_codes.is_empty() {
            return Err(AsmError::NoStoredCodes);
        }
        let mut mean = DVector::zeros(self.basis_count());
        for c in &self.training_codes {
            mean += c;
        }
        mean /= self.training_codes.len() as f64;
        Ok(ShapeCode(mean))
    }

    /// Pure-geometry stand-in for the shape classifier: transforms the
    /// observed cloud into the canonical frame through `pose` and returns the
    /// training code whose reconstruction minimizes the one-sided
    /// (measurement -> model vertices) Chamfer distance. Ties break to the
    /// lower model index.
    pub fn nearest_corpus_code(
        &self,
        observed: &PointCloud,
        pose: &Sim3Pose,
    ) -> Result<ShapeCode, AsmError> {
        if self.training_codes.is_empty() {
            return Err(AsmError::NoStoredCodes);
        }
        if observed.is_empty() {
            return Err(AsmError::Format("observed cloud is empty".into()));
        }
        let inv = pose.inverse();
        let canonical = observed.map(|p| inv.apply(p));
        let mut best: Option<(usize, f64)> = None;
        for u in 0..self.training_codes.len() {
            let mesh = self.reconstruct(&self.training_code(u))?;
            // Uniform area-weighted surface samples; raw vertices would bias
            // the distance by each model's vertex density.
            let surface = crate::meshfit::sample_surface(&mesh, 512, 0)
                .map_err(|e| AsmError::Format(e.to_string()))?;
            let tree = crate::geometry::KdTree::build(surface.positions());
            let cost: f64 = canonical
                .points()
                .iter()
                .map(|p| tree.nearest(p, 1)[0].dist2)
                .sum::<f64>()
                / canonical.len() as f64;
            if best.map_or(true, |(_, c)| cost < c) {
                best = Some((u, cost));
            }
        }
        Ok(self.training_code(best.expect("nonempty corpus").0))
    }
}

const MAGIC: &[u8; 4] = b"SASM";
const VERSION: u32 = 1;

/// Writes the model in the `SASM1` byte layout (see FORMATS.md).
pub fn save_asm<W: Write>(asm: &ActiveShapeModel, mut w: W) -> Result<(), AsmError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let cat = asm.category.as_bytes();
    w.write_u32::<LittleEndian>(cat.len() as u32)?;
    w.write_all(cat)?;
    let (v, f, k, u) = (
        asm.vertex_count(),
        asm.faces.len(),
        asm.basis_count(),
        asm.training_codes.len(),
    );
    for n in [v, f, k, u] {
        w.write_u32::<LittleEndian>(n as u32)?;
    }
    for x in asm.mean.iter() {
        w.write_f64::<LittleEndian>(*x)?;
    }
    for row in 0..k {
        for col in 0..3 * v {
            w.write_f64::<LittleEndian>(asm.bases[(row, col)])?;
        }
    }
    for s in &asm.singular_values {
        w.write_f64::<LittleEndian>(*s)?;
    }
    for code in &asm.training_codes {
        for x in code.iter() {
            w.write_f64::<LittleEndian>(*x)?;
        }
    }
    for face in &asm.faces {
        for &i in face {
            w.write_u32::<LittleEndian>(i as u32)?;
        }
    }
    Ok(())
}

/// Reads a model written by [`save_asm`].
pub fn load_asm<R: Read>(mut r: R) -> Result<ActiveShapeModel, AsmError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AsmError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(AsmError::Format(format!("unsupported version {version}")));
    }
    let cat_len = r.read_u32::<LittleEndian>()? as usize;
    let mut cat = vec![0u8; cat_len];
    r.read_exact(&mut cat)?;
    let category =
        String::from_utf8(cat).map_err(|_| AsmError::Format("category not UTF-8".into()))?;
    let v = r.read_u32::<LittleEndian>()? as usize;
    let f = r.read_u32::<LittleEndian>()? as usize;
    let k = r.read_u32::<LittleEndian>()? as usize;
    let u = r.read_u32::<LittleEndian>()? as usize;
    let mut mean = DVector::zeros(3 * v);
    for i in 0..3 * v {
        mean[i] = r.read_f64::<LittleEndian>()?;
    }
    let mut bases = DMatrix::zeros(k, 3 * v);
    for row in 0..k {
        for col in 0..3 * v {
            bases[(row, col)] = r.read_f64::<LittleEndian>()?;
        }
    }
    let mut singular_values = vec![0.0; k];
    for s in singular_values.iter_mut() {
        *s = r.read_f64::<LittleEndian>()?;
    }
    let mut training_codes = Vec::with_capacity(u);
    for _ in 0..u {
        let mut c = DVector::zeros(k);
        for i in 0..k {
            c[i] = r.read_f64::<LittleEndian>()?;
        }
        training_codes.push(c);
    }
    let mut faces = Vec::with_capacity(f);
    for _ in 0..f {
        let mut face = [0usize; 3];
        for slot in face.iter_mut() {
            let idx = r.read_u32::<LittleEndian>()? as usize;
            if idx >= v {
                return Err(AsmError::Format("face index out of range".into()));
            }
            *slot = idx;
        }
        faces.push(face);
    }
    Ok(ActiveShapeModel {
        category,
        mean,
        bases,
        singular_values,
        training_codes,
        faces,
    })
}

pub fn save_asm_file(asm: &ActiveShapeModel, path: &Path) -> Result<(), AsmError> {
    save_asm(asm, io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_asm_file(path: &Path) -> Result<ActiveShapeModel, AsmError> {
    load_asm(io::BufReader::new(std::fs::File::open(path)?))
}
