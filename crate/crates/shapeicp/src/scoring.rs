//! Hypothesis scoring: residual statistics, symmetry consistency, and a
//! software depth renderer used for the render score.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{ActiveShapeModel, ShapeCode};
use crate::geometry::{KdTree, Mesh, PointCloud, Sim3Pose};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("every mesh vertex is behind the camera")]
    AllBehindCamera,
    #[error("observed depth image has no valid pixels")]
    EmptyMask,
    #[error("score component is not finite: {0}")]
    NonFinite(String),
    #[error("invalid depth image: {0}")]
    InvalidImage(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid symmetry operation: {0}")]
    InvalidSymmetry(String),
    #[error(transparent)]
    Asm(#[from] crate::asm::AsmError),
}

/// Depth value marking pixels with no surface (background).
pub const BACKGROUND_DEPTH: f64 = 0.0;

/// A dense depth image in meters; `BACKGROUND_DEPTH` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ScoringError> {
        if data.len() != width * height {
            return Err(ScoringError::InvalidImage(format!(
                "expected {} values, got {}",
                width * height,
                data.len()
            )));
        }
        for &d in &data {
            if !(d.is_finite() && (d > 0.0 || d == BACKGROUND_DEPTH)) {
                return Err(ScoringError::InvalidImage(format!("bad depth value {d}")));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![BACKGROUND_DEPTH; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.data[v * self.width + u] = d;
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.get(u, v) != BACKGROUND_DEPTH
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d != BACKGROUND_DEPTH).count()
    }

    /// Bounding box `(u0, v0, u1, v1)` of valid pixels, inclusive.
    pub fn valid_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
        for v in 0..self.height {
            for u in 0..self.width {
                if self.is_valid(u, v) {
                    u0 = u0.min(u);
                    v0 = v0.min(v);
                    u1 = u1.max(u);
                    v1 = v1.max(v);
                }
            }
        }
        (u0 != usize::MAX).then_some((u0, v0, u1, v1))
    }
}

/// Pinhole camera model; `depth_scale` converts stored integer units to meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(ScoringError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        // The principal point may fall outside the pixel grid: cropping an
        // off-center region yields exactly that, and the projection math
        // does not care. It only has to be finite.
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(ScoringError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(ScoringError::InvalidIntrinsics(
                "depth scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One symmetry operation of the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetryKind {
    Rotation,
    Reflection,
}

#[derive(Debug, Clone)]
pub struct SymmetryOp {
    matrix: Matrix3<f64>,
    kind: SymmetryKind,
}

impl SymmetryOp {
    pub fn new(matrix: Matrix3<f64>, kind: SymmetryKind) -> Result<Self, ScoringError> {
        let err = (matrix.transpose() * matrix - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(ScoringError::InvalidSymmetry(format!(
                "matrix not orthonormal (residual {err:.2e})"
            )));
        }
        let det = matrix.determinant();
        let want = match kind {
            SymmetryKind::Rotation => 1.0,
            SymmetryKind::Reflection => -1.0,
        };
        if (det - want).abs() > 1e-9 {
            return Err(ScoringError::InvalidSymmetry(format!(
                "determinant {det:.3} does not match tag {kind:?}"
            )));
        }
        Ok(Self { matrix, kind })
    }

    pub fn rotation(axis: Vector3<f64>, angle_rad: f64) -> Self {
        Self {
            matrix: Sim3Pose::rotation_about(axis, angle_rad),
            kind: SymmetryKind::Rotation,
        }
    }

    /// Reflection across the plane through the origin with the given normal.
    pub fn reflection(normal: Vector3<f64>) -> Self {
        let n = normal.normalize();
        Self {
            matrix: Matrix3::identity() - 2.0 * n * n.transpose(),
            kind: SymmetryKind::Reflection,
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> SymmetryKind {
        self.kind
    }
}

/// The symmetry operations of one category's canonical frame.
#[derive(Debug, Clone, Default)]
pub struct SymmetrySpec {
    ops: Vec<SymmetryOp>,
}

impl SymmetrySpec {
    pub fn new(ops: Vec<SymmetryOp>) -> Self {
        Self { ops }
    }

    pub fn none() -> Self {
        Self { ops: Vec::new() }
    }

    pub fn ops(&self) -> &[SymmetryOp] {
        &self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Proper rotations only (used by symmetry-aware rotation error).
    pub fn proper_rotations(&self) -> Vec<Matrix3<f64>> {
        self.ops
            .iter()
            .filter(|op| op.kind == SymmetryKind::Rotation)
            .map(|op| op.matrix)
            .collect()
    }
}

/// One human-editable catalog entry; see the `symmetries` config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SymmetryEntry {
    /// `count`-fold rotational symmetry about `axis` (ops at k*360/count deg).
    Rotation { axis: [f64; 3], count: u32 },
    /// Mirror symmetry across the plane with the given normal.
    Mirror { normal: [f64; 3] },
}

/// Category name -> symmetry entries, serialized as JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SymmetryCatalog(pub std::collections::BTreeMap<String, Vec<SymmetryEntry>>);

impl SymmetryCatalog {
    pub fn spec_for(&self, category: &str) -> SymmetrySpec {
        let Some(entries) = self.0.get(category) else {
            return SymmetrySpec::none();
        };
        let mut ops = Vec::new();
        for entry in entries {
            match entry {
                SymmetryEntry::Rotation { axis, count } => {
                    let axis = Vector3::new(axis[0], axis[1], axis[2]);
                    for k in 1..=*count {
                        let angle = 2.0 * std::f64::consts::PI * k as f64 / *count as f64;
                        ops.push(SymmetryOp::rotation(axis, angle));
                    }
                }
                SymmetryEntry::Mirror { normal } => {
                    ops.push(SymmetryOp::reflection(Vector3::new(
                        normal[0], normal[1], normal[2],
                    )));
                }
            }
        }
        SymmetrySpec::new(ops)
    }
}

/// Mean and population standard deviation of the per-measurement residuals.
pub fn residual_scores(residuals: &[f64]) -> (f64, f64) {
    if residuals.is_empty() {
        return (0.0, 0.0);
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean squared one-sided distance from each point to the reference tree,
/// together with the population std of those per-point values.
fn one_sided_stats(points: &[Vector3<f64>], tree: &KdTree) -> (f64, f64) {
    let residuals: Vec<f64> = points
        .iter()
        .map(|p| tree.nearest(p, 1)[0].dist2)
        .collect();
    residual_scores(&residuals)
}

/// Symmetry consistency score: maps the measurements through the conjugated
/// symmetry op `T R_psi T^-1` and measures how well they still land on the
/// transformed model samples. Empty specs score 0.
pub fn symmetry_score(
    pose: &Sim3Pose,
    transformed_model: &[Vector3<f64>],
    measurements: &PointCloud,
    spec: &SymmetrySpec,
) -> f64 {
    if spec.is_empty() {
        return 0.0;
    }
    let tree = KdTree::build(transformed_model);
    let inv = pose.inverse();
    let mut total = 0.0;
    for op in spec.ops() {
        let mapped: Vec<Vector3<f64>> = measurements
            .points()
            .iter()
            .map(|q| pose.apply(&(op.matrix() * inv.apply(q))))
            .collect();
        let (mean, std) = one_sided_stats(&mapped, &tree);
        total += mean + std;
    }
    total / spec.ops().len() as f64
}

/// Renders the mesh under `pose` into a depth image via z-buffering with
/// perspective-correct interpolation. Backface culling is off: a badly fit
/// hypothesis can legitimately view faces from inside.
pub fn render_depth(
    pose: &Sim3Pose,
    mesh: &Mesh,
    cam: &CameraIntrinsics,
) -> Result<DepthImage, ScoringError> {
    cam.validate()?;
    let camera_space: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| pose.apply(v)).collect();
    if camera_space.iter().all(|v| v.z <= 0.0) {
        return Err(ScoringError::AllBehindCamera);
    }
    // Pixel sample positions sit at integer coordinates so that rendering and
    // back-projection are exact inverses of each other.
    let project = |p: &Vector3<f64>| -> (f64, f64) {
        (
            cam.fx * p.x / p.z + cam.cx,
            cam.fy * p.y / p.z + cam.cy,
        )
    };
    let mut image = DepthImage::background(cam.width, cam.height);
    const NEAR: f64 = 1e-6;
    for face in mesh.faces() {
        let a = &camera_space[face[0]];
        let b = &camera_space[face[1]];
        let c = &camera_space[face[2]];
        // Triangles touching the camera plane are skipped rather than clipped;
        // objects of interest sit fully in front of the camera.
        if a.z <= NEAR || b.z <= NEAR || c.z <= NEAR {
            continue;
        }
        let (ax, ay) = project(a);
        let (bx, by) = project(b);
        let (cx, cy) = project(c);
        let area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
        if area.abs() < 1e-12 {
            continue;
        }
        let u_min = ax.min(bx).min(cx).ceil().max(0.0) as usize;
        let u_max = ax.max(bx).max(cx).floor().min((cam.width - 1) as f64);
        let v_min = ay.min(by).min(cy).ceil().max(0.0) as usize;
        let v_max = ay.max(by).max(cy).floor().min((cam.height - 1) as f64);
        if u_max < 0.0 || v_max < 0.0 {
            continue;
        }
        let (u_max, v_max) = (u_max as usize, v_max as usize);
        for v in v_min..=v_max {
            for u in u_min..=u_max {
                let (px, py) = (u as f64, v as f64);
                let la = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area;
                let lb = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area;
                let lc = 1.0 - la - lb;
                if la < 0.0 || lb < 0.0 || lc < 0.0 {
                    continue;
                }
                let inv_z = la / a.z + lb / b.z + lc / c.z;
                let depth = 1.0 / inv_z;
                let current = image.get(u, v);
                if current == BACKGROUND_DEPTH || depth < current {
                    image.set(u, v, depth);
                }
            }
        }
    }
    Ok(image)
}

/// Whether the render score averages over the full bounding-box crop
/// (penalizing oversized silhouettes) or only mask-interior pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderScoreRegion {
    FullCrop,
    MaskOnly,
}

/// Longest side of the downsampled crop used for render scoring.
pub const RENDER_CROP_MAX_SIDE: usize = 96;

/// Crops the observed image to its valid bounding box, downsamples so the
/// longer side is at most `RENDER_CROP_MAX_SIDE`, and derives the matching
/// intrinsics for rendering into the crop.
pub fn crop_for_scoring(
    cam: &CameraIntrinsics,
    observed: &DepthImage,
) -> Result<(CameraIntrinsics, DepthImage), ScoringError> {
    let (u0, v0, u1, v1) = observed.valid_bounds().ok_or(ScoringError::EmptyMask)?;
    let (w, h) = (u1 - u0 + 1, v1 - v0 + 1);
    let step = w.max(h).div_ceil(RENDER_CROP_MAX_SIDE);
    let (cw, ch) = (w.div_ceil(step), h.div_ceil(step));
    let mut data = Vec::with_capacity(cw * ch);
    for v in 0..ch {
        for u in 0..cw {
            data.push(observed.get(u0 + u * step, v0 + v * step));
        }
    }
    let crop_cam = CameraIntrinsics {
        fx: cam.fx / step as f64,
        fy: cam.fy / step as f64,
        cx: (cam.cx - u0 as f64) / step as f64,
        cy: (cam.cy - v0 as f64) / step as f64,
        width: cw,
        height: ch,
        depth_scale: cam.depth_scale,
    };
    let crop = DepthImage::new(cw, ch, data)?;
    Ok((crop_cam, crop))
}

/// Depth-render score: mean squared depth difference over the scoring region.
/// Background pixels participate with depth `BACKGROUND_DEPTH`, which is what
/// penalizes oversized silhouettes in `FullCrop` mode.
pub fn depth_render_score(
    pose: &Sim3Pose,
    asm: &ActiveShapeModel,
    code: &ShapeCode,
    cam: &CameraIntrinsics,
    observed: &DepthImage,
    region: RenderScoreRegion,
) -> Result<f64, ScoringError> {
    let mesh = asm.reconstruct(code)?;
    let (crop_cam, crop) = crop_for_scoring(cam, observed)?;
    let rendered = match render_depth(pose, &mesh, &crop_cam) {
        Ok(img) => img,
        Err(ScoringError::AllBehindCamera) => {
            DepthImage::background(crop_cam.width, crop_cam.height)
        }
        Err(e) => return Err(e),
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..crop.height() {
        for u in 0..crop.width() {
            if region == RenderScoreRegion::MaskOnly && !crop.is_valid(u, v) {
                continue;
            }
            let d = rendered.get(u, v) - crop.get(u, v);
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ScoringError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// `S_tot = S_r + S_sigma + lambda_psi * S_psi + lambda_dr * S_dr`.
pub fn total_score(
    s_r: f64,
    s_sigma: f64,
    s_psi: f64,
    s_dr: f64,
    lambda_psi: f64,
    lambda_dr: f64,
) -> Result<f64, ScoringError> {
    let tot = s_r + s_sigma + lambda_psi * s_psi + lambda_dr * s_dr;
    if !tot.is_finite() {
        return Err(ScoringError::NonFinite(format!(
            "S_tot from ({s_r}, {s_sigma}, {s_psi}, {s_dr})"
        )));
    }
    Ok(tot)
}
