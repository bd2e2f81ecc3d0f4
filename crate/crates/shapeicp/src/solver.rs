//! The alternating pose/shape optimizer: EM soft association, weighted
//! Umeyama pose steps, gradient-descent shape steps, and the multi-hypothesis
//! manager over the rotation grid with staged pruning.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{ActiveShapeModel, ShapeCode};
use crate::geometry::{
    closest_point_on_triangle, geodesic_angle, so3_grid, umeyama, KdTree, PointCloud,
    RotationGrid, Sim3Pose,
};
use crate::meshfit::{
    edge_length_loss, laplacian_loss, normal_consistency_loss, sample_surface, SurfaceSamples,
};
use crate::scoring::{
    depth_render_score, residual_scores, symmetry_score, total_score, CameraIntrinsics,
    DepthImage, RenderScoreRegion, SymmetrySpec,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("no measurements supplied")]
    EmptyMeasurements,
    #[error("empty inputs to association (need at least q model points)")]
    EmptyInputs,
    #[error("all hypotheses died: {diagnostics}")]
    AllHypothesesDead { diagnostics: String },
    #[error("non-finite loss in the shape step (iteration {iteration})")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Asm(#[from] crate::asm::AsmError),
    #[error(transparent)]
    MeshFit(#[from] crate::meshfit::MeshFitError),
    #[error(transparent)]
    Scoring(#[from] crate::scoring::ScoringError),
}

/// One pruning milestone: after `iteration`, keep at most `keep` hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMilestone {
    pub iteration: usize,
    pub keep: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Number of soft-association candidates per measurement.
    pub q: usize,
    /// Association std at iteration 0, as a fraction of the initial scale.
    pub sigma_start: f64,
    /// Association std at the final iteration, same units.
    pub sigma_end: f64,
    pub iterations: usize,
    /// First iteration at which the shape step runs; earlier iterations are
    /// pose-only so the coarse hypothesis field stays cheap.
    pub shape_start_iteration: usize,
    pub shape_inner_steps: usize,
    pub shape_step_size: f64,
    /// The shape step is skipped during this many final iterations.
    pub shape_freeze_tail: usize,
    /// Shape-step regularizer weights (same roles as in mesh deformation).
    pub lambda_n: f64,
    pub lambda_e: f64,
    pub lambda_l: f64,
    pub pruning: Vec<PruneMilestone>,
    /// Minimum pairwise angular separation between survivors, degrees.
    pub separation_deg: f64,
    pub lambda_psi: f64,
    pub lambda_dr: f64,
    /// Depth rendering participates in scoring once the alive count is at or
    /// below this threshold.
    pub render_threshold: usize,
    pub render_region: RenderScoreRegion,
    /// Surface samples drawn from the model per hypothesis while the
    /// hypothesis field is still large.
    pub model_samples: usize,
    /// Denser sample set used once few hypotheses remain; one-sided nearest
    /// neighbor bias shrinks with model density, so this sets the final
    /// rotational accuracy.
    pub fine_model_samples: usize,
    /// Alive-hypothesis count at or below which the fine set is used.
    pub fine_threshold: usize,
    /// Measurements are deterministically subsampled down to this count.
    pub max_measurements: usize,
    pub grid_level: u32,
    pub seed: u64,
    /// Weight of the model-to-measurement coverage score in the total.
    pub lambda_cov: f64,
    /// Coverage distances are truncated at this fraction of the hypothesis
    /// scale, so surface lost to occlusion costs every hypothesis the same
    /// bounded amount instead of dominating the score.
    pub cov_truncation: f64,
    /// The pose step may not move the scale beyond this factor away from the
    /// hypothesis's initial patch-statistics estimate (in either direction).
    pub scale_drift_limit: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            q: 3,
            sigma_start: 0.1,
            sigma_end: 0.02,
            iterations: 60,
            shape_start_iteration: 10,
            shape_inner_steps: 5,
            shape_step_size: 1e-2,
            shape_freeze_tail: 10,
            lambda_n: 0.01,
            lambda_e: 0.1,
            lambda_l: 0.1,
            pruning: vec![
                PruneMilestone {
                    iteration: 5,
                    keep: 256,
                },
                PruneMilestone {
                    iteration: 10,
                    keep: 64,
                },
                PruneMilestone {
                    iteration: 20,
                    keep: 16,
                },
                PruneMilestone {
                    iteration: 35,
                    keep: 4,
                },
            ],
            separation_deg: 20.0,
            lambda_psi: 0.2,
            lambda_dr: 0.01,
            render_threshold: 600,
            // Score only pixels with an observation: occlusion turns observed
            // pixels into background, and charging the model for rendering
            // over them punishes correct poses, not wrong ones. Shifted or
            // oversized hypotheses still pay through wrong interior depths
            // and uncovered mask pixels.
            render_region: RenderScoreRegion::MaskOnly,
            model_samples: 300,
            fine_model_samples: 2000,
            fine_threshold: 64,
            max_measurements: 400,
            grid_level: 1,
            seed: 0,
            lambda_cov: 1.0,
            cov_truncation: 0.2,
            scale_drift_limit: 1.3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.q == 0 || self.iterations == 0 || self.model_samples == 0 {
            return Err(SolverError::EmptyInputs);
        }
        if self.separation_deg < 0.0 {
            return Err(SolverError::EmptyInputs);
        }
        if !(self.lambda_cov >= 0.0 && self.cov_truncation > 0.0 && self.scale_drift_limit >= 1.0)
        {
            return Err(SolverError::EmptyInputs);
        }
        let mut last = usize::MAX;
        for m in &self.pruning {
            if m.keep == 0 || m.keep >= last {
                return Err(SolverError::EmptyInputs);
            }
            last = m.keep;
        }
        Ok(())
    }
}

/// Per-hypothesis scores; `s_dr` is 0 until rendering activates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub s_r: f64,
    pub s_sigma: f64,
    pub s_psi: f64,
    pub s_dr: f64,
    pub s_cov: f64,
    pub s_tot: f64,
}

/// One tracked estimation state, seeded from one grid rotation.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub pose: Sim3Pose,
    pub code: ShapeCode,
    /// Patch-statistics scale estimate this hypothesis started from; the
    /// pose step keeps the scale within `scale_drift_limit` of it.
    pub init_scale: f64,
    /// Model surface samples transformed by the current pose.
    pub transformed: Vec<Vector3<f64>>,
    /// Latest per-measurement residuals `r_m = min_n ||s R p_n + t - q_m||^2`.
    pub residuals: Vec<f64>,
    pub scores: Scores,
    pub alive: bool,
    /// Set when a pose step hit a degenerate Umeyama configuration.
    pub degenerate: bool,
}

/// Soft association of each measurement with its Q nearest model points.
#[derive(Debug, Clone, Copy)]
pub struct Association {
    pub index: usize,
    pub dist2: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct EmAssociations {
    /// Per measurement, sorted by distance.
    pub per_measurement: Vec<Vec<Association>>,
    /// Per-measurement Gaussian std in meters.
    pub sigma: Vec<f64>,
}

/// EM soft association (Eqs. 8 and 11): the Q nearest transformed model
/// points per measurement, weighted by Gaussian likelihood. Each weight set
/// satisfies `sum_n (2 sigma_m^2) w_mn = 1`.
pub fn em_associate(
    measurements: &PointCloud,
    model_points: &[Vector3<f64>],
    q: usize,
    sigma: &[f64],
) -> Result<EmAssociations, SolverError> {
    if measurements.is_empty()
        || q == 0
        || model_points.len() < q
        || sigma.len() != measurements.len()
    {
        return Err(SolverError::EmptyInputs);
    }
    let tree = KdTree::build(model_points);
    let mut per_measurement = Vec::with_capacity(measurements.len());
    for (m, point) in measurements.points().iter().enumerate() {
        let neighbors = tree.nearest(point, q);
        let two_sigma2 = 2.0 * sigma[m] * sigma[m];
        // Subtracting the minimum squared distance keeps the exponentials in
        // range; it cancels in the normalization.
        let d2_min = neighbors[0].dist2;
        let raw: Vec<f64> = neighbors
            .iter()
            .map(|n| (-(n.dist2 - d2_min) / two_sigma2).exp())
            .collect();
        let denom: f64 = raw.iter().sum();
        per_measurement.push(
            neighbors
                .iter()
                .zip(&raw)
                .map(|(n, &a)| Association {
                    index: n.index,
                    dist2: n.dist2,
                    weight: a / (two_sigma2 * denom),
                })
                .collect(),
        );
    }
    Ok(EmAssociations {
        per_measurement,
        sigma: sigma.to_vec(),
    })
}

/// Canonical-frame surface targets that stay linear in the shape code:
/// target `i` evaluates to `base[i] + jacobians[i] * c`.
#[derive(Debug, Clone)]
pub struct LinearPoints {
    pub base: Vec<Vector3<f64>>,
    pub jacobians: Vec<DMatrix<f64>>,
}

impl LinearPoints {
    /// Targets at the fixed barycentric surface samples.
    pub fn from_samples(
        asm: &ActiveShapeModel,
        samples: &SurfaceSamples,
    ) -> Result<Self, SolverError> {
        let zero = ShapeCode::zeros(asm.basis_count());
        let (points, jacobians) = asm.sample_points_with_jacobian(samples, &zero)?;
        Ok(Self {
            base: points.points().to_vec(),
            jacobians,
        })
    }

    pub fn evaluate(&self, code: &ShapeCode) -> Vec<Vector3<f64>> {
        self.base
            .iter()
            .zip(&self.jacobians)
            .map(|(b, j)| {
                let mut p = *b;
                for (kk, &c) in code.0.iter().enumerate() {
                    p.x += c * j[(0, kk)];
                    p.y += c * j[(1, kk)];
                    p.z += c * j[(2, kk)];
                }
                p
            })
            .collect()
    }
}

/// Re-targets every association from the candidate sample point to the
/// closest point on the triangle carrying that sample, recomputing distances
/// and weights against the snapped targets. The returned association indices
/// refer to the returned targets, one per association.
///
/// Snapping removes the tangential component of point-to-sample distances.
/// That component scales with the model, so leaving it in rewards shrinking
/// the model to densify its samples — a strong scale bias when the
/// measurements cover only the camera-facing part of the surface. The
/// snapped point keeps fixed barycentric weights within a step, so it is
/// still a linear function of the shape code.
pub fn snap_associations(
    measurements: &PointCloud,
    assoc: &EmAssociations,
    asm: &ActiveShapeModel,
    samples: &SurfaceSamples,
    code: &ShapeCode,
    pose: &Sim3Pose,
) -> Result<(EmAssociations, LinearPoints), SolverError> {
    if assoc.per_measurement.len() != measurements.len() {
        return Err(SolverError::EmptyInputs);
    }
    let mesh = asm.reconstruct(code)?;
    let verts = mesh.vertices();
    let faces = asm.faces();
    let bases = asm.bases();
    let k = asm.basis_count();
    let inv = pose.inverse();
    let s2 = pose.scale() * pose.scale();
    let mut per_measurement = Vec::with_capacity(measurements.len());
    let mut base = Vec::new();
    let mut jacobians = Vec::new();
    for (m, q_m) in measurements.points().iter().enumerate() {
        let q_canon = inv.apply(q_m);
        let two_sigma2 = 2.0 * assoc.sigma[m] * assoc.sigma[m];
        let mut snapped: Vec<(usize, f64, [f64; 3])> = assoc.per_measurement[m]
            .iter()
            .map(|a| {
                let f = samples.face_indices()[a.index];
                let idx = faces[f];
                let (p, bary) = closest_point_on_triangle(
                    &q_canon,
                    &verts[idx[0]],
                    &verts[idx[1]],
                    &verts[idx[2]],
                );
                (f, s2 * (p - q_canon).norm_squared(), bary)
            })
            .collect();
        snapped.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let d2_min = snapped[0].1;
        let raw: Vec<f64> = snapped
            .iter()
            .map(|&(_, d2, _)| (-(d2 - d2_min) / two_sigma2).exp())
            .collect();
        let denom: f64 = raw.iter().sum();
        let mut assocs = Vec::with_capacity(snapped.len());
        for ((f, d2, bary), a) in snapped.into_iter().zip(&raw) {
            let idx = faces[f];
            let mut p0 = Vector3::zeros();
            let mut jac = DMatrix::zeros(3, k);
            for corner in 0..3 {
                let vi = idx[corner];
                let gamma = bary[corner];
                p0 += gamma
                    * Vector3::new(
                        asm.mean_vector()[3 * vi],
                        asm.mean_vector()[3 * vi + 1],
                        asm.mean_vector()[3 * vi + 2],
                    );
                for kk in 0..k {
                    jac[(0, kk)] += gamma * bases[(kk, 3 * vi)];
                    jac[(1, kk)] += gamma * bases[(kk, 3 * vi + 1)];
                    jac[(2, kk)] += gamma * bases[(kk, 3 * vi + 2)];
                }
            }
            assocs.push(Association {
                index: base.len(),
                dist2: d2,
                weight: a / (two_sigma2 * denom),
            });
            base.push(p0);
            jacobians.push(jac);
        }
        per_measurement.push(assocs);
    }
    Ok((
        EmAssociations {
            per_measurement,
            sigma: assoc.sigma.clone(),
        },
        LinearPoints { base, jacobians },
    ))
}

/// Value, code gradient, and weighted correspondence pairs of the EM
/// objective (Eq. 10) with the association weights frozen.
#[derive(Debug, Clone)]
pub struct EmObjective {
    pub value: f64,
    pub code_grad: DVector<f64>,
    /// (transformed model point, measurement, weight) triples for Umeyama.
    pub src: Vec<Vector3<f64>>,
    pub dst: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

pub fn em_objective(
    measurements: &PointCloud,
    model_points: &PointCloud,
    jacobians: &[DMatrix<f64>],
    pose: &Sim3Pose,
    assoc: &EmAssociations,
) -> Result<EmObjective, SolverError> {
    if assoc.per_measurement.len() != measurements.len() {
        return Err(SolverError::EmptyInputs);
    }
    let k = jacobians.first().map_or(0, |j| j.ncols());
    let transformed: Vec<Vector3<f64>> =
        model_points.points().iter().map(|p| pose.apply(p)).collect();
    let rot_t = pose.rotation().transpose();
    let s = pose.scale();
    let mut value = 0.0;
    let mut code_grad = DVector::zeros(k);
    let pair_count: usize = assoc.per_measurement.iter().map(Vec::len).sum();
    let mut src = Vec::with_capacity(pair_count);
    let mut dst = Vec::with_capacity(pair_count);
    let mut weights = Vec::with_capacity(pair_count);
    for (m, q_m) in measurements.points().iter().enumerate() {
        for a in &assoc.per_measurement[m] {
            let y = &transformed[a.index];
            let diff = y - q_m;
            value += a.weight * diff.norm_squared();
            // d/dc ||sRp(c) + t - q||^2 = 2 w s (R^T diff)^T J.
            let back = 2.0 * a.weight * s * (rot_t * diff);
            let jac = &jacobians[a.index];
            for kk in 0..k {
                code_grad[kk] += back.x * jac[(0, kk)]
                    + back.y * jac[(1, kk)]
                    + back.z * jac[(2, kk)];
            }
            src.push(*y);
            dst.push(*q_m);
            weights.push(a.weight);
        }
    }
    Ok(EmObjective {
        value,
        code_grad,
        src,
        dst,
        weights,
    })
}

/// Weighted-Umeyama pose step: solves the incremental SIM(3) aligning the
/// currently transformed model points with the measurements and composes it
/// onto the pose. Returns `None` on a degenerate configuration (the caller
/// keeps the old pose and flags the hypothesis).
pub fn pose_step(pose: &Sim3Pose, objective: &EmObjective) -> Option<Sim3Pose> {
    let src = PointCloud::new(objective.src.clone()).ok()?;
    let dst = PointCloud::new(objective.dst.clone()).ok()?;
    let incremental = umeyama(&src, &dst, &objective.weights).ok()?;
    Some(incremental.compose(pose))
}

/// Shape-step objective: the EM point term evaluated in the canonical frame
/// plus the mesh regularizers, with the gradient chained through the linear
/// shape model. Measurements are mapped into the canonical frame, which
/// centers and normalizes both clouds by the same amount, so the deformation
/// lambda defaults transfer.
fn shape_objective(
    code: &ShapeCode,
    canonical_measurements: &[Vector3<f64>],
    assoc: &EmAssociations,
    asm: &ActiveShapeModel,
    targets: &LinearPoints,
    cfg: &SolverConfig,
) -> Result<(f64, DVector<f64>), SolverError> {
    let k = asm.basis_count();
    let points = targets.evaluate(code);
    let jacobians = &targets.jacobians;
    let m_count = canonical_measurements.len() as f64;
    let mut value = 0.0;
    let mut grad = DVector::zeros(k);
    for (m, q_m) in canonical_measurements.iter().enumerate() {
        // 2 sigma^2 restores the per-measurement normalization of Eq. 11, so
        // the point term is a weighted mean of squared distances and sits on
        // the same scale as the Chamfer term in mesh deformation.
        let two_sigma2 = 2.0 * assoc.sigma[m] * assoc.sigma[m];
        for a in &assoc.per_measurement[m] {
            let w = two_sigma2 * a.weight / m_count;
            let diff = points[a.index] - q_m;
            value += w * diff.norm_squared();
            let back = 2.0 * w * diff;
            let jac = &jacobians[a.index];
            for kk in 0..k {
                grad[kk] += back.x * jac[(0, kk)]
                    + back.y * jac[(1, kk)]
                    + back.z * jac[(2, kk)];
            }
        }
    }
    if cfg.lambda_n != 0.0 || cfg.lambda_e != 0.0 || cfg.lambda_l != 0.0 {
        let mesh = asm.reconstruct(code)?;
        let mut vertex_grad = vec![Vector3::zeros(); mesh.vertices().len()];
        for (lambda, loss) in [
            (cfg.lambda_n, normal_consistency_loss(&mesh)?),
            (cfg.lambda_e, edge_length_loss(&mesh)?),
            (cfg.lambda_l, laplacian_loss(&mesh)?),
        ] {
            let (l, g) = loss;
            value += lambda * l;
            for (acc, gi) in vertex_grad.iter_mut().zip(&g) {
                *acc += lambda * gi;
            }
        }
        // Chain rule through v_i(c) = b_0,i + sum_k c_k b_k,i.
        let bases = asm.bases();
        for kk in 0..k {
            let mut dot = 0.0;
            for (i, g) in vertex_grad.iter().enumerate() {
                dot += g.x * bases[(kk, 3 * i)]
                    + g.y * bases[(kk, 3 * i + 1)]
                    + g.z * bases[(kk, 3 * i + 2)];
            }
            grad[kk] += dot;
        }
    }
    Ok((value, grad))
}

/// A few gradient-descent steps on the shape code with backtracking halving.
pub fn shape_step(
    pose: &Sim3Pose,
    code: &ShapeCode,
    measurements: &PointCloud,
    assoc: &EmAssociations,
    asm: &ActiveShapeModel,
    targets: &LinearPoints,
    cfg: &SolverConfig,
    iteration: usize,
) -> Result<ShapeCode, SolverError> {
    let inv = pose.inverse();
    let canonical: Vec<Vector3<f64>> =
        measurements.points().iter().map(|q| inv.apply(q)).collect();
    let mut current = code.clone();
    let (mut value, mut grad) =
        shape_objective(&current, &canonical, assoc, asm, targets, cfg)?;
    for _ in 0..cfg.shape_inner_steps {
        if !value.is_finite() {
            return Err(SolverError::NonFiniteLoss { iteration });
        }
        let mut step = cfg.shape_step_size;
        let mut accepted = None;
        for _ in 0..8 {
            let candidate = ShapeCode(&current.0 - step * &grad);
            let (cand_value, cand_grad) =
                shape_objective(&candidate, &canonical, assoc, asm, targets, cfg)?;
            if cand_value.is_finite() && cand_value <= value {
                accepted = Some((candidate, cand_value, cand_grad));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((c, v, g)) => {
                current = c;
                value = v;
                grad = g;
            }
            None => break,
        }
    }
    Ok(current)
}

/// One hypothesis per grid rotation, each with its own translation and scale
/// estimated from the visible patch. A depth camera sees only the
/// camera-facing part of the surface, so the patch centroid lies on the
/// surface rather than at the object center, and the patch spread
/// understates the object size. Both effects are predicted per rotation: for
/// each grid rotation the canonical surface samples facing the camera are
/// selected, and the hypothesis scale and translation are chosen so that the
/// predicted patch matches the observed one in centroid and RMS radius. The
/// alternating refinement corrects scale poorly once associations settle, so
/// getting the right scale for the near-truth rotations at initialization
/// matters more than any single shared estimate. The shape starts at the
/// mean code unless an initializer supplies one.
pub fn initialize_hypotheses(
    measurements: &PointCloud,
    asm: &ActiveShapeModel,
    grid: &RotationGrid,
    initial_code: Option<&ShapeCode>,
) -> Result<Vec<Hypothesis>, SolverError> {
    if measurements.is_empty() {
        return Err(SolverError::EmptyMeasurements);
    }
    let centroid = measurements.centroid();
    let r_patch = (measurements
        .points()
        .iter()
        .map(|q| (q - centroid).norm_squared())
        .sum::<f64>()
        / measurements.len() as f64)
        .sqrt();
    if r_patch <= 0.0 {
        return Err(SolverError::EmptyMeasurements);
    }
    let mean_mesh = asm.reconstruct(&asm.mean_code()?)?;
    let canon = sample_surface(&mean_mesh, 1024, 0)?;
    // Viewing ray from the camera at the origin; degenerate only when the
    // object is centered on the camera.
    let view = if centroid.norm() > 1e-9 {
        centroid.normalize()
    } else {
        Vector3::z()
    };
    let code = match initial_code {
        Some(c) => c.clone(),
        None => asm.mean_code()?,
    };
    grid.rotations()
        .iter()
        .map(|r| {
            // Canonical samples this rotation would present to the camera:
            // the half-space test against the back-rotated viewing ray uses
            // the sample position as a normal proxy, which is adequate for
            // the roughly star-shaped meshes the models are built from.
            let view_c = r.transpose() * view;
            let mut c_half = Vector3::zeros();
            let mut n_half = 0usize;
            for p in canon.positions() {
                if p.dot(&view_c) < 0.0 {
                    c_half += p;
                    n_half += 1;
                }
            }
            if n_half == 0 {
                return Err(SolverError::EmptyMeasurements);
            }
            c_half /= n_half as f64;
            let r_half = (canon
                .positions()
                .iter()
                .filter(|p| p.dot(&view_c) < 0.0)
                .map(|p| (p - c_half).norm_squared())
                .sum::<f64>()
                / n_half as f64)
                .sqrt();
            // Match the observed patch statistics: RMS radius fixes the
            // scale, the predicted patch centroid fixes the translation.
            let s = r_patch / r_half.max(1e-12);
            let center = centroid - s * (r * c_half);
            let pose = Sim3Pose::new(*r, center, s)?;
            Ok(Hypothesis {
                pose,
                init_scale: s,
                code: code.clone(),
                transformed: Vec::new(),
                residuals: Vec::new(),
                scores: Scores::default(),
                alive: true,
                degenerate: false,
            })
        })
        .collect()
}

/// Inputs needed for the depth-render score.
pub struct RenderContext<'a> {
    pub cam: &'a CameraIntrinsics,
    pub observed: &'a DepthImage,
}

/// Result of a full multi-hypothesis run: the best hypothesis plus the other
/// survivors ranked by total score.
#[derive(Debug)]
pub struct SolveOutcome {
    pub best: Hypothesis,
    pub survivors: Vec<Hypothesis>,
    pub iterations_run: usize,
}

/// Squared distance from each measurement to the model surface, via the
/// nearest sample's triangle.
fn refresh_residuals(
    hyp: &mut Hypothesis,
    measurements: &PointCloud,
    asm: &ActiveShapeModel,
    samples: &SurfaceSamples,
) -> Result<(), SolverError> {
    let sigma = vec![1.0; measurements.len()];
    let assoc = em_associate(measurements, &hyp.transformed, 1, &sigma)?;
    let (snapped, _) =
        snap_associations(measurements, &assoc, asm, samples, &hyp.code, &hyp.pose)?;
    hyp.residuals = snapped
        .per_measurement
        .iter()
        .map(|n| n[0].dist2)
        .collect();
    Ok(())
}

/// Model-to-measurement coverage: truncated mean squared distance from the
/// camera-facing transformed model samples to the nearest measurement. The
/// one-sided association terms never charge for model surface that no
/// measurement explains, so an inflated model hugging the visible patch can
/// match the true pose on every other term; this term charges its
/// protruding surface. Truncation bounds the toll from genuinely occluded
/// surface, which all hypotheses pay roughly equally. Back-facing samples
/// (outward direction proxy `q - t` pointing away from the camera ray) are
/// invisible and excluded.
fn coverage_score(hyp: &Hypothesis, meas_tree: &KdTree, cfg: &SolverConfig) -> f64 {
    let t = hyp.pose.translation();
    let cap = (cfg.cov_truncation * hyp.pose.scale()).powi(2);
    let mut sum = 0.0;
    let mut n = 0usize;
    for q in &hyp.transformed {
        if (q - t).dot(q) >= 0.0 {
            continue;
        }
        let d2 = meas_tree.nearest(q, 1)[0].dist2.min(cap);
        sum += d2;
        n += 1;
    }
    if n == 0 {
        cap
    } else {
        sum / n as f64
    }
}

fn score_hypothesis(
    hyp: &mut Hypothesis,
    measurements: &PointCloud,
    meas_tree: &KdTree,
    asm: &ActiveShapeModel,
    spec: &SymmetrySpec,
    render: Option<&RenderContext<'_>>,
    cfg: &SolverConfig,
) -> Result<(), SolverError> {
    let (s_r, s_sigma) = residual_scores(&hyp.residuals);
    let s_psi = symmetry_score(&hyp.pose, &hyp.transformed, measurements, spec);
    let s_dr = match render {
        Some(ctx) => depth_render_score(
            &hyp.pose,
            asm,
            &hyp.code,
            ctx.cam,
            ctx.observed,
            cfg.render_region,
        )?,
        None => 0.0,
    };
    let s_cov = coverage_score(hyp, meas_tree, cfg);
    let s_tot = total_score(s_r, s_sigma, s_psi, s_dr, cfg.lambda_psi, cfg.lambda_dr)?
        + cfg.lambda_cov * s_cov;
    if !s_tot.is_finite() {
        return Err(SolverError::NonFiniteLoss { iteration: 0 });
    }
    hyp.scores = Scores {
        s_r,
        s_sigma,
        s_psi,
        s_dr,
        s_cov,
        s_tot,
    };
    Ok(())
}

/// Total-score ratio within which final survivors count as tied.
const FINAL_TIE_BAND: f64 = 1.10;

/// Greedy top-k selection under the pairwise angular-separation rule; when
/// fewer than `keep` candidates satisfy it, remaining slots fill in pure
/// score order.
fn select_survivors(order: &[usize], hyps: &[Hypothesis], keep: usize, sep_deg: f64) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(keep);
    for &i in order {
        if chosen.len() >= keep {
            break;
        }
        let separated = chosen.iter().all(|&j| {
            geodesic_angle(hyps[i].pose.rotation(), hyps[j].pose.rotation()) >= sep_deg
        });
        if separated {
            chosen.push(i);
        }
    }
    for &i in order {
        if chosen.len() >= keep {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen
}

/// Deterministically subsamples the measurements down to `max` points.
fn subsample(measurements: &PointCloud, max: usize, seed: u64) -> PointCloud {
    if measurements.len() <= max {
        return measurements.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, measurements.len(), max).into_vec();
    idx.sort_unstable();
    PointCloud::new(idx.iter().map(|&i| measurements.points()[i]).collect())
        .expect("subsample of a valid cloud")
}

/// Runs the full multi-hypothesis estimation (Alg. 1) over the configured
/// rotation grid and returns the minimum-score hypothesis.
pub fn run(
    measurements: &PointCloud,
    asm: &ActiveShapeModel,
    spec: &SymmetrySpec,
    render: Option<RenderContext<'_>>,
    cfg: &SolverConfig,
    initial_code: Option<&ShapeCode>,
) -> Result<SolveOutcome, SolverError> {
    let grid = so3_grid(cfg.grid_level);
    run_with_grid(measurements, asm, spec, render, cfg, initial_code, &grid)
}

/// Like [`run`] but over a caller-supplied rotation grid.
pub fn run_with_grid(
    measurements: &PointCloud,
    asm: &ActiveShapeModel,
    spec: &SymmetrySpec,
    render: Option<RenderContext<'_>>,
    cfg: &SolverConfig,
    initial_code: Option<&ShapeCode>,
    grid: &RotationGrid,
) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    if measurements.is_empty() {
        return Err(SolverError::EmptyMeasurements);
    }
    let measurements = subsample(measurements, cfg.max_measurements, cfg.seed);
    // Fixed barycentric sample sets, shared by every hypothesis so shape
    // codes are compared on identical surface locations.
    let mean_mesh = asm.reconstruct(&asm.mean_code()?)?;
    let coarse = sample_surface(&mean_mesh, cfg.model_samples, cfg.seed.wrapping_add(13))?;
    let fine = sample_surface(
        &mean_mesh,
        cfg.fine_model_samples.max(cfg.model_samples),
        cfg.seed.wrapping_add(17),
    )?;
    let mut hyps = initialize_hypotheses(&measurements, asm, grid, initial_code)?;
    let initial_scale = hyps[0].pose.scale();
    let sigma_uniform = vec![0.0; measurements.len()];
    let meas_tree = KdTree::build(measurements.points());

    let mut iterations_run = 0;
    for iter in 0..cfg.iterations {
        iterations_run = iter + 1;
        let t = if cfg.iterations > 1 {
            iter as f64 / (cfg.iterations - 1) as f64
        } else {
            0.0
        };
        let sigma_frac = cfg.sigma_start + (cfg.sigma_end - cfg.sigma_start) * t;
        let sigma_val = sigma_frac * initial_scale;
        let mut sigma = sigma_uniform.clone();
        sigma.fill(sigma_val);
        let run_shape = iter >= cfg.shape_start_iteration
            && iter + cfg.shape_freeze_tail < cfg.iterations;
        let alive_count = hyps.iter().filter(|h| h.alive).count();
        let samples = if alive_count <= cfg.fine_threshold {
            &fine
        } else {
            &coarse
        };

        for hyp in hyps.iter_mut().filter(|h| h.alive) {
            let (points, _) = asm.sample_points_with_jacobian(samples, &hyp.code)?;
            hyp.transformed = points.points().iter().map(|p| hyp.pose.apply(p)).collect();
            let candidates = em_associate(&measurements, &hyp.transformed, cfg.q, &sigma)?;
            let (assoc, targets) = snap_associations(
                &measurements,
                &candidates,
                asm,
                samples,
                &hyp.code,
                &hyp.pose,
            )?;
            hyp.residuals = assoc
                .per_measurement
                .iter()
                .map(|n| n[0].dist2)
                .collect();
            let snapped_points = PointCloud::new(targets.evaluate(&hyp.code))?;
            let objective = em_objective(
                &measurements,
                &snapped_points,
                &targets.jacobians,
                &hyp.pose,
                &assoc,
            )?;
            match pose_step(&hyp.pose, &objective) {
                Some(pose) => {
                    let clamped = pose.scale().clamp(
                        hyp.init_scale / cfg.scale_drift_limit,
                        hyp.init_scale * cfg.scale_drift_limit,
                    );
                    hyp.pose = if clamped == pose.scale() {
                        pose
                    } else {
                        Sim3Pose::new(*pose.rotation(), *pose.translation(), clamped)?
                    };
                }
                None => hyp.degenerate = true,
            }
            if run_shape {
                match shape_step(
                    &hyp.pose,
                    &hyp.code,
                    &measurements,
                    &assoc,
                    asm,
                    &targets,
                    cfg,
                    iter,
                ) {
                    Ok(code) => hyp.code = code,
                    Err(SolverError::NonFiniteLoss { .. }) => hyp.alive = false,
                    Err(e) => return Err(e),
                }
            }
        }

        if let Some(milestone) = cfg.pruning.iter().find(|m| m.iteration == iter) {
            let alive: Vec<usize> = (0..hyps.len()).filter(|&i| hyps[i].alive).collect();
            if alive.is_empty() {
                return Err(SolverError::AllHypothesesDead {
                    diagnostics: format!("no alive hypotheses at iteration {iter}"),
                });
            }
            let use_render = render.as_ref().filter(|_| alive.len() <= cfg.render_threshold);
            for &i in &alive {
                let (points, _) = asm.sample_points_with_jacobian(samples, &hyps[i].code)?;
                hyps[i].transformed = points
                    .points()
                    .iter()
                    .map(|p| hyps[i].pose.apply(p))
                    .collect();
                refresh_residuals(&mut hyps[i], &measurements, asm, samples)?;
                score_hypothesis(&mut hyps[i], &measurements, &meas_tree, asm, spec, use_render, cfg)?;
            }
            let mut order = alive.clone();
            order.sort_by(|&a, &b| {
                hyps[a]
                    .scores
                    .s_tot
                    .partial_cmp(&hyps[b].scores.s_tot)
                    .expect("finite scores")
                    .then(a.cmp(&b))
            });
            let keep = select_survivors(&order, &hyps, milestone.keep, cfg.separation_deg);
            for &i in &alive {
                if !keep.contains(&i) {
                    hyps[i].alive = false;
                }
            }
        }
    }

    // Final scoring pass over the survivors.
    let alive: Vec<usize> = (0..hyps.len()).filter(|&i| hyps[i].alive).collect();
    if alive.is_empty() {
        return Err(SolverError::AllHypothesesDead {
            diagnostics: format!(
                "no alive hypotheses after {iterations_run} iterations \
                 ({} started, {} degenerate)",
                hyps.len(),
                hyps.iter().filter(|h| h.degenerate).count()
            ),
        });
    }
    let use_render = render.as_ref().filter(|_| alive.len() <= cfg.render_threshold);
    let samples = if alive.len() <= cfg.fine_threshold {
        &fine
    } else {
        &coarse
    };
    for &i in &alive {
        let (points, _) = asm.sample_points_with_jacobian(samples, &hyps[i].code)?;
        hyps[i].transformed = points
            .points()
            .iter()
            .map(|p| hyps[i].pose.apply(p))
            .collect();
        refresh_residuals(&mut hyps[i], &measurements, asm, samples)?;
        score_hypothesis(&mut hyps[i], &measurements, &meas_tree, asm, spec, use_render, cfg)?;
    }
    let mut ranked: Vec<Hypothesis> = alive.iter().map(|&i| hyps[i].clone()).collect();
    ranked.sort_by(|a, b| {
        a.scores
            .s_tot
            .partial_cmp(&b.scores.s_tot)
            .expect("finite scores")
    });
    // Among survivors whose total scores agree within the noise of the
    // image-space terms (silhouette-boundary pixels flip with sub-pixel pose
    // changes), the point residual is the highest-resolution discriminator,
    // so it breaks the tie.
    let band = ranked[0].scores.s_tot * FINAL_TIE_BAND;
    let best_idx = ranked
        .iter()
        .enumerate()
        .take_while(|(_, h)| h.scores.s_tot <= band)
        .min_by(|(_, a), (_, b)| {
            a.scores
                .s_r
                .partial_cmp(&b.scores.s_r)
                .expect("finite scores")
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let best = ranked.remove(best_idx);
    Ok(SolveOutcome {
        best,
        survivors: ranked,
        iterations_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::Rng;

    use crate::geometry::Mesh;

    /// Asymmetric blob corpus: quadratic cross-terms break every 180-degree
    /// rotational symmetry of the base ellipsoid, so pose is identifiable.
    fn sphere_asm() -> ActiveShapeModel {
        let sphere = Mesh::icosphere(2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let corpus: Vec<Mesh> = (0..4)
            .map(|_| {
                let a = 0.9 + 0.2 * rng.gen::<f64>();
                let b = 0.6 + 0.15 * rng.gen::<f64>();
                let c = 0.35 + 0.1 * rng.gen::<f64>();
                let verts: Vec<Vector3<f64>> = sphere
                    .vertices()
                    .iter()
                    .map(|v| {
                        Vector3::new(
                            a * v.x,
                            b * v.y + 0.15 * v.x * v.x,
                            c * v.z + 0.12 * v.y * v.y,
                        )
                    })
                    .collect();
                sphere.with_vertices(verts).unwrap().normalized_unit_diagonal()
            })
            .collect();
        crate::asm::build_asm("blob", &corpus, 2).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_candidate_weight() {
        let meas = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        let model = [Vector3::new(0.3, 0.0, 0.0)];
        let sigma = [0.2];
        let assoc = em_associate(&meas, &model, 1, &sigma).unwrap();
        let w = assoc.per_measurement[0][0].weight;
        assert_relative_eq!(w, 1.0 / (2.0 * 0.2 * 0.2), epsilon = 1e-12);
    }

    #[test]
    fn equidistant_candidates_share_weight() {
        let meas = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        let model = [
            Vector3::new(0.5, 0.0, 0.0),
            Vector3::new(0.0, 0.5, 0.0),
            Vector3::new(0.0, 0.0, 0.5),
        ];
        let sigma = [0.3];
        let assoc = em_associate(&meas, &model, 3, &sigma).unwrap();
        for a in &assoc.per_measurement[0] {
            assert_relative_eq!(a.weight, 1.0 / (6.0 * 0.3 * 0.3), epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_match_direct_gaussian() {
        // Distances (0, sigma, 2 sigma) -> relative weights (1, e^-1/2, e^-2).
        let sigma_v = 0.25;
        let meas = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        let model = [
            Vector3::zeros(),
            Vector3::new(sigma_v, 0.0, 0.0),
            Vector3::new(2.0 * sigma_v, 0.0, 0.0),
        ];
        let assoc = em_associate(&meas, &model, 3, &[sigma_v]).unwrap();
        let gauss = |d: f64| (-d * d / (2.0 * sigma_v * sigma_v)).exp();
        let expected = [gauss(0.0), gauss(sigma_v), gauss(2.0 * sigma_v)];
        let w = &assoc.per_measurement[0];
        for i in 1..3 {
            assert_relative_eq!(
                w[i].weight / w[0].weight,
                expected[i] / expected[0],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn weight_normalization_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let meas = random_cloud(&mut rng, 20);
            let model = random_cloud(&mut rng, 40);
            let sigma: Vec<f64> = (0..20).map(|_| 0.05 + 0.3 * rng.gen::<f64>()).collect();
            let assoc = em_associate(&meas, model.points(), 3, &sigma).unwrap();
            for (m, list) in assoc.per_measurement.iter().enumerate() {
                let total: f64 = list
                    .iter()
                    .map(|a| 2.0 * sigma[m] * sigma[m] * a.weight)
                    .sum();
                assert_relative_eq!(total, 1.0, epsilon = 1e-10);
                // Sorted by distance, nonnegative.
                for pair in list.windows(2) {
                    assert!(pair[0].dist2 <= pair[1].dist2);
                }
                assert!(list.iter().all(|a| a.weight >= 0.0));
            }
        }
    }

    #[test]
    fn objective_zero_at_perfect_fit() {
        let asm = sphere_asm();
        let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let samples = sample_surface(&mesh, 100, 5).unwrap();
        let code = asm.mean_code().unwrap();
        let (points, jacs) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
        let sigma = vec![0.1; points.len()];
        let assoc = em_associate(&points, points.points(), 1, &sigma).unwrap();
        let obj =
            em_objective(&points, &points, &jacs, &Sim3Pose::identity(), &assoc).unwrap();
        assert!(obj.value < 1e-20);
        assert!(obj.code_grad.amax() < 1e-10);
    }

    #[test]
    fn code_gradient_matches_finite_differences() {
        let asm = sphere_asm();
        let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let samples = sample_surface(&mesh, 60, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pose = Sim3Pose::new(
            Sim3Pose::rotation_about(Vector3::new(0.2, 1.0, -0.3), 0.7),
            Vector3::new(0.1, -0.2, 0.9),
            1.4,
        )
        .unwrap();
        for _ in 0..5 {
            let code = ShapeCode(DVector::from_fn(asm.basis_count(), |_, _| {
                0.2 * (rng.gen::<f64>() - 0.5)
            }));
            let meas = random_cloud(&mut rng, 30).map(|p| pose.apply(&(p * 0.4)));
            let (points, jacs) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
            let sigma = vec![0.15; meas.len()];
            let transformed: Vec<Vector3<f64>> =
                points.points().iter().map(|p| pose.apply(p)).collect();
            let assoc = em_associate(&meas, &transformed, 3, &sigma).unwrap();
            let obj = em_objective(&meas, &points, &jacs, &pose, &assoc).unwrap();
            // Central finite differences with the associations held frozen.
            let eps = 1e-6;
            for kk in 0..asm.basis_count() {
                let eval = |c: &ShapeCode| {
                    let (p, j) = asm.sample_points_with_jacobian(&samples, c).unwrap();
                    em_objective(&meas, &p, &j, &pose, &assoc).unwrap().value
                };
                let mut plus = code.clone();
                plus.0[kk] += eps;
                let mut minus = code.clone();
                minus.0[kk] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let rel = (obj.code_grad[kk] - fd).abs() / fd.abs().max(1e-9);
                assert!(rel < 1e-6, "k={kk}: analytic {} vs fd {fd}", obj.code_grad[kk]);
            }
        }
    }

    #[test]
    fn pose_step_identity_at_perfect_fit() {
        let asm = sphere_asm();
        let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let samples = sample_surface(&mesh, 100, 5).unwrap();
        let code = asm.mean_code().unwrap();
        let pose = Sim3Pose::new(
            Sim3Pose::rotation_about(Vector3::y(), 0.4),
            Vector3::new(0.0, 0.1, 1.0),
            2.0,
        )
        .unwrap();
        let (points, jacs) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
        let transformed: Vec<Vector3<f64>> =
            points.points().iter().map(|p| pose.apply(p)).collect();
        let meas = PointCloud::new(transformed.clone()).unwrap();
        let sigma = vec![0.1; meas.len()];
        let assoc = em_associate(&meas, &transformed, 1, &sigma).unwrap();
        let obj = em_objective(&meas, &points, &jacs, &pose, &assoc).unwrap();
        let updated = pose_step(&pose, &obj).unwrap();
        assert!(geodesic_angle(updated.rotation(), pose.rotation()) < 1e-7);
        assert!((updated.translation() - pose.translation()).norm() < 1e-9);
        assert!((updated.scale() - pose.scale()).abs() < 1e-9);
    }

    #[test]
    fn pose_step_recovers_small_transform() {
        // Perfect Q=1 correspondences to a slightly moved copy: one weighted
        // Umeyama solve recovers the full SIM(3) at once.
        let asm = sphere_asm();
        let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let samples = sample_surface(&mesh, 200, 5).unwrap();
        let code = asm.mean_code().unwrap();
        let pose = Sim3Pose::identity();
        let (points, jacs) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
        let delta = Sim3Pose::new(
            Sim3Pose::rotation_about(Vector3::new(0.1, 0.3, 1.0), 0.02),
            Vector3::new(0.005, -0.003, 0.01),
            1.01,
        )
        .unwrap();
        let meas = points.map(|p| delta.apply(p));
        let sigma_v = 0.1;
        // Perfect correspondences: measurement m pairs with model point m
        // (random samples can nearly coincide, so exact NN is not guaranteed).
        let assoc = EmAssociations {
            per_measurement: (0..meas.len())
                .map(|m| {
                    vec![Association {
                        index: m,
                        dist2: (meas.points()[m] - points.points()[m]).norm_squared(),
                        weight: 1.0 / (2.0 * sigma_v * sigma_v),
                    }]
                })
                .collect(),
            sigma: vec![sigma_v; meas.len()],
        };
        let obj = em_objective(&meas, &points, &jacs, &pose, &assoc).unwrap();
        let updated = pose_step(&pose, &obj).unwrap();
        assert!(geodesic_angle(updated.rotation(), delta.rotation()) < 1e-6);
        assert!((updated.translation() - delta.translation()).norm() < 1e-6);
        assert!((updated.scale() - delta.scale()).abs() < 1e-6);
    }

    #[test]
    fn pose_step_never_increases_frozen_objective() {
        let asm = sphere_asm();
        let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let samples = sample_surface(&mesh, 80, 5).unwrap();
        let code = asm.mean_code().unwrap();
        let (points, jacs) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let pose = Sim3Pose::new(
                Sim3Pose::rotation_about(
                    Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
                    rng.gen::<f64>() * 3.0,
                ),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                0.5 + rng.gen::<f64>(),
            )
            .unwrap();
            let meas = random_cloud(&mut rng, 25);
            let sigma = vec![0.05 + 0.2 * rng.gen::<f64>(); 25];
            let transformed: Vec<Vector3<f64>> =
                points.points().iter().map(|p| pose.apply(p)).collect();
            let assoc = em_associate(&meas, &transformed, 2, &sigma).unwrap();
            let before = em_objective(&meas, &points, &jacs, &pose, &assoc).unwrap();
            let updated = pose_step(&pose, &before).unwrap();
            let after = em_objective(&meas, &points, &jacs, &updated, &assoc).unwrap();
            assert!(
                after.value <= before.value + 1e-9 * before.value.max(1.0),
                "objective rose {} -> {}",
                before.value,
                after.value
            );
        }
    }

    #[test]
    fn shape_gradient_zero_at_optimum() {
        let asm = sphere_asm();
        let code = asm.training_code(1);
        let mesh = asm.reconstruct(&code).unwrap();
        let samples = sample_surface(&mesh, 150, 5).unwrap();
        let targets = LinearPoints::from_samples(&asm, &samples).unwrap();
        let pose = Sim3Pose::new(
            Sim3Pose::rotation_about(Vector3::x(), 0.5),
            Vector3::new(0.2, 0.0, 1.1),
            1.8,
        )
        .unwrap();
        let (points, _) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
        let transformed: Vec<Vector3<f64>> =
            points.points().iter().map(|p| pose.apply(p)).collect();
        let meas = PointCloud::new(transformed.clone()).unwrap();
        let sigma = vec![0.1; meas.len()];
        let assoc = em_associate(&meas, &transformed, 1, &sigma).unwrap();
        let cfg = SolverConfig {
            lambda_n: 0.0,
            lambda_e: 0.0,
            lambda_l: 0.0,
            ..SolverConfig::default()
        };
        let inv = pose.inverse();
        let canonical: Vec<Vector3<f64>> =
            meas.points().iter().map(|q| inv.apply(q)).collect();
        let (_, grad) =
            shape_objective(&code, &canonical, &assoc, &asm, &targets, &cfg).unwrap();
        assert!(grad.amax() < 1e-8, "gradient at optimum {}", grad.amax());
    }

    #[test]
    fn single_step_follows_negative_gradient() {
        let asm = sphere_asm();
        let code = asm.mean_code().unwrap();
        let mesh = asm.reconstruct(&code).unwrap();
        let samples = sample_surface(&mesh, 100, 5).unwrap();
        let targets = LinearPoints::from_samples(&asm, &samples).unwrap();
        let target_code = asm.training_code(0);
        let (target_points, _) = asm
            .sample_points_with_jacobian(&samples, &target_code)
            .unwrap();
        let meas = PointCloud::new(target_points.points().to_vec()).unwrap();
        let sigma = vec![0.1; meas.len()];
        let (points, _) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
        let assoc = em_associate(&meas, points.points(), 1, &sigma).unwrap();
        let cfg = SolverConfig {
            lambda_n: 0.0,
            lambda_e: 0.0,
            lambda_l: 0.0,
            shape_inner_steps: 1,
            shape_step_size: 1e-3,
            ..SolverConfig::default()
        };
        let updated = shape_step(
            &Sim3Pose::identity(),
            &code,
            &meas,
            &assoc,
            &asm,
            &targets,
            &cfg,
            0,
        )
        .unwrap();
        let canonical: Vec<Vector3<f64>> = meas.points().to_vec();
        let (_, grad) =
            shape_objective(&code, &canonical, &assoc, &asm, &targets, &cfg).unwrap();
        let expected = &code.0 - cfg.shape_step_size * &grad;
        assert!((updated.0 - expected).amax() < 1e-14);
    }

    #[test]
    fn shape_step_descends_full_objective() {
        let asm = sphere_asm();
        let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let samples = sample_surface(&mesh, 100, 5).unwrap();
        let targets = LinearPoints::from_samples(&asm, &samples).unwrap();
        let cfg = SolverConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let code = ShapeCode(DVector::from_fn(asm.basis_count(), |_, _| {
                0.3 * (rng.gen::<f64>() - 0.5)
            }));
            let target = asm.training_code(rng.gen_range(0..asm.training_count()));
            let (target_points, _) =
                asm.sample_points_with_jacobian(&samples, &target).unwrap();
            let meas = PointCloud::new(target_points.points().to_vec()).unwrap();
            let sigma = vec![0.05; meas.len()];
            let (points, _) = asm.sample_points_with_jacobian(&samples, &code).unwrap();
            let assoc = em_associate(&meas, points.points(), 2, &sigma).unwrap();
            let canonical: Vec<Vector3<f64>> = meas.points().to_vec();
            let (before, _) =
                shape_objective(&code, &canonical, &assoc, &asm, &targets, &cfg).unwrap();
            let updated = shape_step(
                &Sim3Pose::identity(),
                &code,
                &meas,
                &assoc,
                &asm,
                &targets,
                &cfg,
                0,
            )
            .unwrap();
            let (after, _) =
                shape_objective(&updated, &canonical, &assoc, &asm, &targets, &cfg).unwrap();
            assert!(after <= before + 1e-12, "rose {before} -> {after}");
        }
    }

    #[test]
    fn initialization_counts_and_patch_geometry() {
        let asm = sphere_asm();
        // Hemisphere cap of known radius facing the camera at the origin:
        // points on a sphere of radius rho about `center`, near side only.
        let rho = 0.21;
        let center = Vector3::new(0.05, -0.02, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut pts = Vec::new();
        while pts.len() < 400 {
            let p = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            if p.norm() < 1e-6 {
                continue;
            }
            let dir = p.normalize();
            if dir.z < 0.0 {
                pts.push(center + rho * dir);
            }
        }
        let meas = PointCloud::new(pts).unwrap();
        let grid = so3_grid(1);
        let hyps = initialize_hypotheses(&meas, &asm, &grid, None).unwrap();
        assert_eq!(hyps.len(), 2304);
        for h in &hyps {
            assert!(h.pose.scale().is_finite() && h.pose.scale() > 0.0);
            assert!(h.pose.translation().iter().all(|v| v.is_finite()));
        }
        let centroid_err = (meas.centroid() - center).norm();
        // Every hypothesis predicts its own visible patch; the ones whose
        // rotations are compatible with the data should land the center
        // estimate much closer to the true center than the raw patch
        // centroid (which sits on the surface, half a radius too near) and
        // bracket the true size. The test cloud is a near-spherical cap, so
        // require this of at least a tenth of the grid rather than a single
        // privileged rotation.
        let mean_mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let canon = sample_surface(&mean_mesh, 4096, 0).unwrap();
        let r_canon = (canon
            .positions()
            .iter()
            .map(|p| p.norm_squared())
            .sum::<f64>()
            / canon.positions().len() as f64)
            .sqrt();
        let good = hyps
            .iter()
            .filter(|h| {
                let implied = h.pose.scale() * r_canon;
                let init_err = (h.pose.translation() - center).norm();
                (implied / rho - 1.0).abs() < 0.35
                    && init_err < 0.3 * rho
                    && init_err < 0.5 * centroid_err
            })
            .count();
        assert!(
            good * 10 >= hyps.len(),
            "only {good} of {} hypotheses near truth",
            hyps.len()
        );
    }

    fn quick_cfg() -> SolverConfig {
        SolverConfig {
            iterations: 30,
            grid_level: 0,
            pruning: vec![
                PruneMilestone {
                    iteration: 3,
                    keep: 24,
                },
                PruneMilestone {
                    iteration: 8,
                    keep: 8,
                },
                PruneMilestone {
                    iteration: 14,
                    keep: 4,
                },
            ],
            shape_start_iteration: 8,
            shape_freeze_tail: 5,
            model_samples: 200,
            max_measurements: 250,
            render_threshold: 8,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn recovers_identity_when_grid_contains_it() {
        let asm = sphere_asm();
        let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
        let samples = sample_surface(&mesh, 2000, 91).unwrap();
        // Camera-facing half of the surface, as a depth camera at the origin
        // looking down +z would see it.
        let gt = Sim3Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0), 0.3)
            .unwrap();
        let meas = PointCloud::new(
            samples
                .positions()
                .iter()
                .filter(|p| p.z < 0.0)
                .map(|p| gt.apply(p))
                .collect(),
        )
        .unwrap();
        // Depth render of the same ground truth for the render score, which
        // is what disambiguates nearby tilts of a smooth convex shape.
        let cam = CameraIntrinsics {
            fx: 160.0,
            fy: 160.0,
            cx: 64.0,
            cy: 48.0,
            width: 128,
            height: 96,
            depth_scale: 1e-4,
        };
        let observed = crate::scoring::render_depth(&gt, &mesh, &cam).unwrap();
        // The standard grid plus the exact identity rotation.
        let mut rotations = so3_grid(0).rotations().to_vec();
        rotations.push(Matrix3::identity());
        let grid = RotationGrid::from_rotations(rotations);
        let cfg = SolverConfig {
            iterations: 40,
            sigma_end: 0.005,
            model_samples: 500,
            fine_model_samples: 4000,
            max_measurements: 800,
            ..quick_cfg()
        };
        let outcome = run_with_grid(
            &meas,
            &asm,
            &SymmetrySpec::none(),
            Some(RenderContext {
                cam: &cam,
                observed: &observed,
            }),
            &cfg,
            None,
            &grid,
        )
        .unwrap();
        let best = &outcome.best;
        assert!(
            geodesic_angle(best.pose.rotation(), &Matrix3::identity()) < 3.0,
            "rotation off by {} deg",
            geodesic_angle(best.pose.rotation(), &Matrix3::identity())
        );
        assert!(
            (best.pose.translation() - gt.translation()).norm() < 0.01,
            "translation off by {}",
            (best.pose.translation() - gt.translation()).norm()
        );
        assert!(
            (best.pose.scale() / gt.scale() - 1.0).abs() < 0.03,
            "scale ratio {}",
            best.pose.scale() / gt.scale()
        );
        for s in &outcome.survivors {
            assert!(best.scores.s_tot <= s.scores.s_tot);
        }
    }

    #[test]
    fn run_is_deterministic() {
        let asm = sphere_asm();
        let code = asm.training_code(2);
        let mesh = asm.reconstruct(&code).unwrap();
        let samples = sample_surface(&mesh, 500, 17).unwrap();
        let pose = Sim3Pose::new(
            Sim3Pose::rotation_about(Vector3::new(0.3, 0.8, -0.1), 0.9),
            Vector3::new(0.1, 0.05, 1.0),
            0.3,
        )
        .unwrap();
        let meas = PointCloud::new(
            samples
                .positions()
                .iter()
                .map(|p| pose.apply(p))
                .collect(),
        )
        .unwrap();
        let cfg = quick_cfg();
        let a = run(&meas, &asm, &SymmetrySpec::none(), None, &cfg, None).unwrap();
        let b = run(&meas, &asm, &SymmetrySpec::none(), None, &cfg, None).unwrap();
        assert_eq!(a.best.pose, b.best.pose);
        assert_eq!(a.best.code.0, b.best.code.0);
        assert_eq!(a.best.scores, b.best.scores);
    }
}
