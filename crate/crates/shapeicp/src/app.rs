//! Data ingestion, preprocessing, the synthetic scene generator, evaluation
//! metrics, and on-disk formats (scenes, meshes, results).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{ActiveShapeModel, ShapeCode};
use crate::geometry::{geodesic_angle, KdTree, Mesh, PointCloud, Sim3Pose};
use crate::meshfit::{sample_surface, DeformationConfig};
use crate::scoring::{
    render_depth, CameraIntrinsics, DepthImage, SymmetrySpec, BACKGROUND_DEPTH,
};
use crate::solver::SolverConfig;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("observation mask selects no valid depth pixels")]
    EmptyMask,
    #[error("too few points: have {have}, need more than {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("rendered object does not intersect the image")]
    ObjectOutOfFrame,
    #[error("degenerate bounding box")]
    DegenerateBox,
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Asm(#[from] crate::asm::AsmError),
    #[error(transparent)]
    MeshFit(#[from] crate::meshfit::MeshFitError),
    #[error(transparent)]
    Scoring(#[from] crate::scoring::ScoringError),
    #[error(transparent)]
    Solver(#[from] crate::solver::SolverError),
}

/// One segmented depth observation of a single object instance.
#[derive(Debug, Clone)]
pub struct DepthObservation {
    pub depth: DepthImage,
    /// Object mask; true = object pixel. Same dimensions as the depth image.
    pub mask: Vec<bool>,
    pub cam: CameraIntrinsics,
    pub category: String,
}

impl DepthObservation {
    /// The observed depth restricted to the mask, background elsewhere.
    pub fn masked_depth(&self) -> DepthImage {
        let mut data = vec![BACKGROUND_DEPTH; self.depth.data().len()];
        for (i, (&d, &m)) in self.depth.data().iter().zip(&self.mask).enumerate() {
            if m {
                data[i] = d;
            }
        }
        DepthImage::new(self.depth.width(), self.depth.height(), data)
            .expect("mask of a valid image is valid")
    }
}

/// Back-projects every masked valid-depth pixel through the pinhole model.
pub fn back_project(obs: &DepthObservation) -> Result<PointCloud, AppError> {
    let mut points = Vec::new();
    for v in 0..obs.depth.height() {
        for u in 0..obs.depth.width() {
            if !obs.mask[v * obs.depth.width() + u] {
                continue;
            }
            let d = obs.depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            points.push(Vector3::new(
                (u as f64 - obs.cam.cx) * d / obs.cam.fx,
                (v as f64 - obs.cam.cy) * d / obs.cam.fy,
                d,
            ));
        }
    }
    if points.is_empty() {
        return Err(AppError::EmptyMask);
    }
    Ok(PointCloud::new(points)?)
}

/// Statistical outlier removal: drops points whose mean distance to their k
/// nearest neighbors exceeds the global mean by more than `alpha` stds.
pub fn remove_outliers(
    cloud: &PointCloud,
    k: usize,
    alpha: f64,
) -> Result<PointCloud, AppError> {
    if cloud.len() <= k {
        return Err(AppError::TooFewPoints {
            have: cloud.len(),
            need: k,
        });
    }
    let tree = KdTree::build(cloud.points());
    let mean_dists: Vec<f64> = cloud
        .points()
        .iter()
        .map(|p| {
            // k+1 neighbors because the point itself is its own nearest.
            let n = tree.nearest(p, k + 1);
            n.iter().skip(1).map(|x| x.dist2.sqrt()).sum::<f64>() / k as f64
        })
        .collect();
    let global_mean = mean_dists.iter().sum::<f64>() / mean_dists.len() as f64;
    let var = mean_dists
        .iter()
        .map(|d| (d - global_mean) * (d - global_mean))
        .sum::<f64>()
        / mean_dists.len() as f64;
    let cutoff = global_mean + alpha * var.sqrt();
    let kept: Vec<Vector3<f64>> = cloud
        .points()
        .iter()
        .zip(&mean_dists)
        .filter(|(_, &d)| d <= cutoff)
        .map(|(p, _)| *p)
        .collect();
    Ok(PointCloud::new(kept)?)
}

/// Minimum-point detection gate.
pub fn gate_detection(cloud: &PointCloud, min_points: usize) -> bool {
    cloud.len() >= min_points
}

/// Ground truth attached to a synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pose: PoseRecord,
    pub code: Vec<f64>,
}

/// Serializable SIM(3) pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl PoseRecord {
    pub fn from_pose(pose: &Sim3Pose) -> Self {
        let r = pose.rotation();
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [
                pose.translation().x,
                pose.translation().y,
                pose.translation().z,
            ],
            scale: pose.scale(),
        }
    }

    pub fn to_pose(&self) -> Result<Sim3Pose, AppError> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let t = Vector3::new(
            self.translation[0],
            self.translation[1],
            self.translation[2],
        );
        Ok(Sim3Pose::new(r, t, self.scale)?)
    }
}

/// Renders a synthetic observation of `reconstruct(asm, code)` at `pose`,
/// with Gaussian depth noise and a contiguous occlusion covering the given
/// fraction of the mask. Depth values are quantized to the camera's depth
/// scale, so writing and re-reading a scene is bitwise exact.
pub fn synth_scene(
    asm: &ActiveShapeModel,
    pose: &Sim3Pose,
    code: &ShapeCode,
    cam: &CameraIntrinsics,
    noise_std: f64,
    occlusion_fraction: f64,
    seed: u64,
) -> Result<(DepthObservation, GroundTruth), AppError> {
    let mesh = asm.reconstruct(code)?;
    let rendered = render_depth(pose, &mesh, cam)?;
    let mut mask: Vec<bool> = rendered
        .data()
        .iter()
        .map(|&d| d != BACKGROUND_DEPTH)
        .collect();
    let object_pixels: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if object_pixels.is_empty() {
        return Err(AppError::ObjectOutOfFrame);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = rendered.data().to_vec();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("positive std");
        for &i in &object_pixels {
            data[i] = (data[i] + normal.sample(&mut rng)).max(cam.depth_scale);
        }
    }
    if occlusion_fraction > 0.0 {
        // Contiguous occlusion: drop the mask pixels closest to a random
        // object pixel until the requested fraction is covered.
        let center = object_pixels[rng.gen_range(0..object_pixels.len())];
        let (cu, cv) = (
            (center % cam.width) as f64,
            (center / cam.width) as f64,
        );
        let mut by_dist: Vec<(f64, usize)> = object_pixels
            .iter()
            .map(|&i| {
                let du = (i % cam.width) as f64 - cu;
                let dv = (i / cam.width) as f64 - cv;
                (du * du + dv * dv, i)
            })
            .collect();
        by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let occlude = (occlusion_fraction * object_pixels.len() as f64).round() as usize;
        for &(_, i) in by_dist.iter().take(occlude) {
            mask[i] = false;
            data[i] = BACKGROUND_DEPTH;
        }
    }
    // Quantize to the storage grid (16-bit depth units).
    for d in &mut data {
        if *d != BACKGROUND_DEPTH {
            let units = (*d / cam.depth_scale).round().clamp(1.0, u16::MAX as f64);
            *d = units * cam.depth_scale;
        }
    }
    let obs = DepthObservation {
        depth: DepthImage::new(cam.width, cam.height, data)
            .map_err(AppError::Scoring)?,
        mask,
        cam: cam.clone(),
        category: asm.category().to_string(),
    };
    let gt = GroundTruth {
        pose: PoseRecord::from_pose(pose),
        code: code.0.iter().copied().collect(),
    };
    Ok((obs, gt))
}

/// An oriented 3D bounding box.
#[derive(Debug, Clone)]
pub struct OrientedBox {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

impl OrientedBox {
    /// The box of `mesh`'s canonical axis-aligned bounds carried through the
    /// SIM(3) pose.
    pub fn from_posed_mesh(pose: &Sim3Pose, mesh: &Mesh) -> Result<Self, AppError> {
        let (lo, hi) = mesh.bounding_box();
        let half = (hi - lo) / 2.0 * pose.scale();
        if half.min() <= 0.0 {
            return Err(AppError::DegenerateBox);
        }
        Ok(Self {
            rotation: *pose.rotation(),
            center: pose.apply(&((lo + hi) / 2.0)),
            half_extents: half,
        })
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.x * self.half_extents.y * self.half_extents.z
    }

    fn corners(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(8);
        for &sx in &[-1.0, 1.0] {
            for &sy in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    let local = Vector3::new(
                        sx * self.half_extents.x,
                        sy * self.half_extents.y,
                        sz * self.half_extents.z,
                    );
                    out.push(self.center + self.rotation * local);
                }
            }
        }
        out
    }

    /// Outward-oriented quad faces.
    fn faces(&self) -> Vec<Vec<Vector3<f64>>> {
        let c = self.corners();
        // Corner index = 4*x + 2*y + z with each bit 0 = -, 1 = +.
        [
            [0, 1, 3, 2], // -x
            [4, 6, 7, 5], // +x
            [0, 4, 5, 1], // -y
            [2, 3, 7, 6], // +y
            [0, 2, 6, 4], // -z
            [1, 5, 7, 3], // +z
        ]
        .iter()
        .map(|idx| idx.iter().map(|&i| c[i]).collect())
        .collect()
    }

    /// Half-spaces `n . x <= d` with outward normals.
    fn half_spaces(&self) -> Vec<(Vector3<f64>, f64)> {
        let mut out = Vec::with_capacity(6);
        for axis in 0..3 {
            let n = self.rotation.column(axis).into_owned();
            let h = self.half_extents[axis];
            out.push((n, n.dot(&self.center) + h));
            out.push((-n, -n.dot(&self.center) + h));
        }
        out
    }
}

/// Clips a convex polytope (outward-oriented faces) by `n . x <= d`.
fn clip_polytope(
    faces: &[Vec<Vector3<f64>>],
    n: &Vector3<f64>,
    d: f64,
) -> Vec<Vec<Vector3<f64>>> {
    const EPS: f64 = 1e-12;
    let mut out: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(faces.len() + 1);
    let mut cap_points: Vec<Vector3<f64>> = Vec::new();
    for face in faces {
        let mut clipped = Vec::with_capacity(face.len() + 2);
        for i in 0..face.len() {
            let a = face[i];
            let b = face[(i + 1) % face.len()];
            let da = n.dot(&a) - d;
            let db = n.dot(&b) - d;
            if da <= EPS {
                clipped.push(a);
            }
            if (da > EPS) != (db > EPS) && (da - db).abs() > EPS {
                let t = da / (da - db);
                let p = a + t * (b - a);
                clipped.push(p);
                cap_points.push(p);
            }
        }
        if clipped.len() >= 3 {
            out.push(clipped);
        }
    }
    if cap_points.len() >= 3 {
        // Order the cap polygon CCW in a plane basis whose cross product is
        // the clip normal, giving the cap an outward orientation.
        let centroid = cap_points.iter().sum::<Vector3<f64>>() / cap_points.len() as f64;
        let e1 = {
            let pick = if n.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            n.cross(&pick).normalize()
        };
        let e2 = n.cross(&e1);
        cap_points.sort_by(|a, b| {
            let pa = a - centroid;
            let pb = b - centroid;
            let aa = pa.dot(&e2).atan2(pa.dot(&e1));
            let ab = pb.dot(&e2).atan2(pb.dot(&e1));
            aa.partial_cmp(&ab).unwrap()
        });
        cap_points.dedup_by(|a, b| (*a - *b).norm() < 1e-9);
        if cap_points.len() >= 3 {
            out.push(cap_points);
        }
    }
    out
}

/// Signed volume of a closed polytope with outward-oriented faces.
fn polytope_volume(faces: &[Vec<Vector3<f64>>]) -> f64 {
    let mut six_v = 0.0;
    for face in faces {
        for i in 1..face.len() - 1 {
            six_v += face[0].dot(&face[i].cross(&face[i + 1]));
        }
    }
    six_v.abs() / 6.0
}

/// Intersection-over-union of two oriented boxes, computed exactly by convex
/// polytope clipping.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox) -> Result<f64, AppError> {
    if a.half_extents.min() <= 0.0 || b.half_extents.min() <= 0.0 {
        return Err(AppError::DegenerateBox);
    }
    let mut faces = a.faces();
    for (n, d) in b.half_spaces() {
        faces = clip_polytope(&faces, &n, d);
        if faces.is_empty() {
            break;
        }
    }
    let inter = polytope_volume(&faces);
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Symmetry-aware pose errors: rotation (degrees, minimized over the proper
/// symmetry rotations), translation (meters), and relative scale.
pub fn pose_errors(
    est: &Sim3Pose,
    gt: &Sim3Pose,
    spec: &SymmetrySpec,
) -> (f64, f64, f64) {
    let mut ops = spec.proper_rotations();
    ops.push(Matrix3::identity());
    let rot_err = ops
        .iter()
        .map(|r_psi| geodesic_angle(&(est.rotation() * r_psi), gt.rotation()))
        .fold(f64::INFINITY, f64::min);
    let trans_err = (est.translation() - gt.translation()).norm();
    let scale_err = (est.scale() - gt.scale()).abs() / gt.scale();
    (rot_err, trans_err, scale_err)
}

/// Chamfer distance between two meshes from area-weighted surface samples,
/// both in the canonical frame.
pub fn chamfer_metric(
    est_mesh: &Mesh,
    gt_mesh: &Mesh,
    n_samples: usize,
) -> Result<f64, AppError> {
    if est_mesh.faces().is_empty() || gt_mesh.faces().is_empty() {
        return Err(AppError::EmptyMesh);
    }
    let a = sample_surface(est_mesh, n_samples, 101)?;
    let b = sample_surface(gt_mesh, n_samples, 102)?;
    let cloud_a = PointCloud::new(a.positions().to_vec())?;
    let cloud_b = PointCloud::new(b.positions().to_vec())?;
    let (value, _) = crate::meshfit::chamfer_loss(&cloud_a, &cloud_b)?;
    Ok(value)
}

/// One evaluated scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub scene: String,
    pub category: String,
    pub skipped: bool,
    pub gt_pose: PoseRecord,
    pub gt_code: Vec<f64>,
    pub est_pose: Option<PoseRecord>,
    pub est_code: Option<Vec<f64>>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_m: Option<f64>,
    pub scale_error_rel: Option<f64>,
    pub iou_3d: Option<f64>,
    pub chamfer: Option<f64>,
    pub runtime_s: f64,
}

/// Threshold accuracies over a result set, in a fixed row order so the CSV
/// bytes are reproducible.
pub fn summarize(records: &[EvaluationRecord]) -> String {
    let evaluated: Vec<&EvaluationRecord> =
        records.iter().filter(|r| !r.skipped).collect();
    let n = evaluated.len();
    let frac = |pred: &dyn Fn(&EvaluationRecord) -> bool| -> f64 {
        if n == 0 {
            return 0.0;
        }
        evaluated.iter().filter(|r| pred(r)).count() as f64 / n as f64
    };
    let pose_within = |r: &EvaluationRecord, deg: f64, m: f64| -> bool {
        matches!(
            (r.rotation_error_deg, r.translation_error_m),
            (Some(rot), Some(t)) if rot < deg && t < m
        )
    };
    let iou_at = |r: &EvaluationRecord, thresh: f64| -> bool {
        matches!(r.iou_3d, Some(i) if i >= thresh)
    };
    let mut chamfers: Vec<f64> = evaluated.iter().filter_map(|r| r.chamfer).collect();
    chamfers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_chamfer = if chamfers.is_empty() {
        f64::NAN
    } else {
        chamfers[chamfers.len() / 2]
    };
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("scenes_total,{}\n", records.len()));
    csv.push_str(&format!("scenes_evaluated,{n}\n"));
    csv.push_str(&format!(
        "acc_5deg_5cm,{:.6}\n",
        frac(&|r| pose_within(r, 5.0, 0.05))
    ));
    csv.push_str(&format!(
        "acc_10deg_5cm,{:.6}\n",
        frac(&|r| pose_within(r, 10.0, 0.05))
    ));
    csv.push_str(&format!("acc_iou50,{:.6}\n", frac(&|r| iou_at(r, 0.50))));
    csv.push_str(&format!("acc_iou75,{:.6}\n", frac(&|r| iou_at(r, 0.75))));
    csv.push_str(&format!("median_chamfer,{median_chamfer:.6e}\n"));
    csv
}

/// Per-scene file metadata: intrinsics plus the category label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
    pub category: String,
}

impl SceneMeta {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            depth_scale: self.depth_scale,
        }
    }
}

/// Writes `<stem>_depth.png` (16-bit), `<stem>_mask.png` (8-bit),
/// `<stem>_meta.json`, and optionally `<stem>_gt.json`.
pub fn save_scene(
    dir: &Path,
    stem: &str,
    obs: &DepthObservation,
    gt: Option<&GroundTruth>,
) -> Result<(), AppError> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (obs.depth.width() as u32, obs.depth.height() as u32);
    let mut depth_img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
    let mut mask_img = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w, h);
    for v in 0..obs.depth.height() {
        for u in 0..obs.depth.width() {
            let d = obs.depth.get(u, v);
            let units = if d == BACKGROUND_DEPTH {
                0
            } else {
                (d / obs.cam.depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
            };
            depth_img.put_pixel(u as u32, v as u32, image::Luma([units]));
            let m = if obs.mask[v * obs.depth.width() + u] {
                255
            } else {
                0
            };
            mask_img.put_pixel(u as u32, v as u32, image::Luma([m]));
        }
    }
    depth_img.save(dir.join(format!("{stem}_depth.png")))?;
    mask_img.save(dir.join(format!("{stem}_mask.png")))?;
    let meta = SceneMeta {
        fx: obs.cam.fx,
        fy: obs.cam.fy,
        cx: obs.cam.cx,
        cy: obs.cam.cy,
        width: obs.cam.width,
        height: obs.cam.height,
        depth_scale: obs.cam.depth_scale,
        category: obs.category.clone(),
    };
    std::fs::write(
        dir.join(format!("{stem}_meta.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    if let Some(gt) = gt {
        std::fs::write(
            dir.join(format!("{stem}_gt.json")),
            serde_json::to_string_pretty(gt)?,
        )?;
    }
    Ok(())
}

/// Loads a scene written by [`save_scene`]; the ground truth is optional.
pub fn load_scene(
    dir: &Path,
    stem: &str,
) -> Result<(DepthObservation, Option<GroundTruth>), AppError> {
    let meta_path = dir.join(format!("{stem}_meta.json"));
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let cam = meta.intrinsics();
    let depth_path = dir.join(format!("{stem}_depth.png"));
    let depth_img = image::open(&depth_path)?.into_luma16();
    if depth_img.width() as usize != cam.width || depth_img.height() as usize != cam.height {
        return Err(AppError::Format {
            path: depth_path.display().to_string(),
            detail: "depth dimensions do not match the metadata".into(),
        });
    }
    let mask_path = dir.join(format!("{stem}_mask.png"));
    let mask_img = image::open(&mask_path)?.into_luma8();
    if mask_img.width() != depth_img.width() || mask_img.height() != depth_img.height() {
        return Err(AppError::Format {
            path: mask_path.display().to_string(),
            detail: "mask dimensions do not match the depth image".into(),
        });
    }
    let mut data = Vec::with_capacity(cam.width * cam.height);
    let mut mask = Vec::with_capacity(cam.width * cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let units = depth_img.get_pixel(u as u32, v as u32)[0];
            data.push(units as f64 * cam.depth_scale);
            mask.push(mask_img.get_pixel(u as u32, v as u32)[0] != 0);
        }
    }
    let obs = DepthObservation {
        depth: DepthImage::new(cam.width, cam.height, data)?,
        mask,
        cam,
        category: meta.category,
    };
    let gt_path = dir.join(format!("{stem}_gt.json"));
    let gt = if gt_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&gt_path)?)?)
    } else {
        None
    };
    Ok((obs, gt))
}

/// Scene stems in a directory, sorted for deterministic processing order.
pub fn list_scenes(dir: &Path) -> Result<Vec<String>, AppError> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_meta.json") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads a Wavefront OBJ mesh; polygons are fan-triangulated.
pub fn load_obj(path: &Path) -> Result<Mesh, AppError> {
    let file = std::fs::File::open(path)?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let fail = |detail: String| AppError::Format {
        path: path.display().to_string(),
        detail,
    };
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coord = || -> Result<f64, AppError> {
                    parts
                        .next()
                        .ok_or_else(|| fail(format!("line {}: short vertex", lineno + 1)))?
                        .parse()
                        .map_err(|e| fail(format!("line {}: {e}", lineno + 1)))
                };
                vertices.push(Vector3::new(coord()?, coord()?, coord()?));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|tok| {
                        let v = tok.split('/').next().unwrap_or(tok);
                        v.parse::<usize>()
                            .map_err(|e| fail(format!("line {}: {e}", lineno + 1)))
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(fail(format!("line {}: face with <3 vertices", lineno + 1)));
                }
                if idx.iter().any(|&i| i == 0) {
                    return Err(fail(format!("line {}: OBJ indices are 1-based", lineno + 1)));
                }
                for i in 1..idx.len() - 1 {
                    faces.push([idx[0] - 1, idx[i] - 1, idx[i + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    Ok(Mesh::new(vertices, faces)?)
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<(), AppError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in mesh.vertices() {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in mesh.faces() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Everything the CLI reads from `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub solver: SolverConfig,
    pub deformation: DeformationConfig,
    pub outlier_k: usize,
    pub outlier_alpha: f64,
    pub min_points: usize,
    /// Category -> symmetry entries; merged over the built-in catalog.
    pub symmetries: BTreeMap<String, Vec<crate::scoring::SymmetryEntry>>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            deformation: DeformationConfig::default(),
            outlier_k: 16,
            outlier_alpha: 2.0,
            min_points: 64,
            symmetries: BTreeMap::new(),
        }
    }
}

impl AppConfig {
    pub fn catalog(&self) -> crate::scoring::SymmetryCatalog {
        crate::scoring::SymmetryCatalog(self.symmetries.clone())
    }
}
