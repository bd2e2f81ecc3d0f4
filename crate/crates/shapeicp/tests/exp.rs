use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeicp::asm::{build_asm, ActiveShapeModel};
use shapeicp::geometry::{geodesic_angle, so3_grid, Mesh, PointCloud, RotationGrid, Sim3Pose};
use shapeicp::meshfit::sample_surface;
use shapeicp::scoring::{render_depth, CameraIntrinsics, SymmetrySpec};
use shapeicp::solver::{run_with_grid, PruneMilestone, RenderContext, SolverConfig};

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
    build_asm("blob", &corpus, 2).unwrap()
}

#[test]
#[ignore]
fn debug_render_ranking() {
    let asm = sphere_asm();
    let mesh = asm.reconstruct(&asm.mean_code().unwrap()).unwrap();
    let samples = sample_surface(&mesh, 2000, 91).unwrap();
    let gt = Sim3Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0), 0.3).unwrap();
    let meas = PointCloud::new(
        samples
            .positions()
            .iter()
            .filter(|p| p.z < 0.0)
            .map(|p| gt.apply(p))
            .collect(),
    )
    .unwrap();
    let cam = CameraIntrinsics {
        fx: 160.0,
        fy: 160.0,
        cx: 64.0,
        cy: 48.0,
        width: 128,
        height: 96,
        depth_scale: 1e-4,
    };
    let observed = render_depth(&gt, &mesh, &cam).unwrap();
    let full = std::env::var("EXP_FULL").is_ok();
    let mut rotations = if full {
        so3_grid(0).rotations().to_vec()
    } else {
        vec![Matrix3::identity(); 4]
    };
    rotations.push(Matrix3::identity());
    let grid = RotationGrid::from_rotations(rotations);
    let cfg = SolverConfig {
        iterations: std::env::var("EXP_ITERS").ok().and_then(|s| s.parse().ok()).unwrap_or(40),
        sigma_end: 0.005,
        model_samples: 500,
        fine_model_samples: 4000,
        max_measurements: 800,
        grid_level: 0,
        pruning: if full {
            vec![
                PruneMilestone { iteration: 3, keep: 24 },
                PruneMilestone { iteration: 8, keep: 8 },
                PruneMilestone { iteration: 14, keep: 4 },
            ]
        } else {
            vec![PruneMilestone { iteration: 999, keep: 5 }]
        },
        ..SolverConfig::default()
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
    let mut all = vec![outcome.best.clone()];
    all.extend(outcome.survivors.iter().cloned());
    for h in &all {
        let rot = geodesic_angle(h.pose.rotation(), gt.rotation());
        println!(
            "rot {rot:7.2} tr {:.4} s/s_gt {:.4} | s_r {:.3e} s_sig {:.3e} s_psi {:.3e} s_dr {:.3e} s_cov {:.3e} s_tot {:.3e}",
            (h.pose.translation() - gt.translation()).norm(),
            h.pose.scale() / gt.scale(),
            h.scores.s_r,
            h.scores.s_sigma,
            h.scores.s_psi,
            h.scores.s_dr,
            h.scores.s_cov,
            h.scores.s_tot
        );
    }
}

#[test]
#[ignore]
fn write_bumpy_corpus() {
    let sphere = Mesh::icosphere(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    std::fs::create_dir_all("/tmp/corpus_bumpy").unwrap();
    for i in 0..6 {
        let a = 0.9 + 0.2 * rng.gen::<f64>();
        let b = 0.65 + 0.2 * rng.gen::<f64>();
        let c = 0.45 + 0.15 * rng.gen::<f64>();
        let bx = 0.10 + 0.08 * rng.gen::<f64>();
        let by = 0.08 + 0.08 * rng.gen::<f64>();
        let bz = 0.06 + 0.08 * rng.gen::<f64>();
        let bxyz = 0.15 + 0.10 * rng.gen::<f64>();
        let verts: Vec<Vector3<f64>> = sphere
            .vertices()
            .iter()
            .map(|v| {
                let r = 1.0
                    + bx * v.x.powi(3)
                    + by * v.y.powi(3)
                    + bz * v.z.powi(3)
                    + bxyz * v.x * v.y * v.z;
                Vector3::new(a * v.x * r, b * v.y * r, c * v.z * r)
            })
            .collect();
        let mesh = sphere.with_vertices(verts).unwrap().normalized_unit_diagonal();
        shapeicp::app::save_obj(&mesh, std::path::Path::new(&format!("/tmp/corpus_bumpy/m{i}.obj"))).unwrap();
    }
}

#[test]
#[ignore]
fn debug_scene_pipeline() {
    use shapeicp::app;
    use shapeicp::scoring::SymmetryOp;
    use shapeicp::solver::{initialize_hypotheses, run, RenderContext};
    let dir = std::path::Path::new("/tmp/scenes10x");
    let asm = shapeicp::asm::load_asm_file(std::path::Path::new("/tmp/box.sasm")).unwrap();
    let cfg = SolverConfig::default();
    let pi = std::f64::consts::PI;
    let spec = SymmetrySpec::new(vec![
        SymmetryOp::rotation(Vector3::x(), pi),
        SymmetryOp::rotation(Vector3::y(), pi),
        SymmetryOp::rotation(Vector3::z(), pi),
    ]);
    let rot_err = |r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>| -> f64 {
        let mut best = geodesic_angle(r_est, r_gt);
        for op in spec.ops() {
            if op.kind() == shapeicp::scoring::SymmetryKind::Rotation {
                let m = r_est * op.matrix();
                best = best.min(geodesic_angle(&m, r_gt));
            }
        }
        best
    };
    for stem in ["scene_0000", "scene_0003", "scene_0005"] {
        let (obs, gt) = app::load_scene(dir, stem).unwrap();
        let gt = gt.unwrap();
        let gt_pose = gt.pose.to_pose().unwrap();
        let cloud = app::back_project(&obs).unwrap();
        let cloud = app::remove_outliers(&cloud, 16, 2.0).unwrap();
        let grid = so3_grid(cfg.grid_level);
        let hyps = initialize_hypotheses(&cloud, &asm, &grid, None).unwrap();
        let best_init = hyps
            .iter()
            .map(|h| {
                (
                    rot_err(h.pose.rotation(), gt_pose.rotation()),
                    h.pose.scale() / gt_pose.scale(),
                    (h.pose.translation() - gt_pose.translation()).norm(),
                )
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .unwrap();
        println!(
            "{stem}: gt scale {:.3}, best init rot {:.2} deg scale-ratio {:.3} terr {:.4}",
            gt_pose.scale(), best_init.0, best_init.1, best_init.2
        );
        let masked = obs.masked_depth();
        let outcome = run(
            &cloud, &asm, &spec,
            Some(RenderContext { cam: &obs.cam, observed: &masked }),
            &cfg, None,
        )
        .unwrap();
        let mut all = vec![outcome.best.clone()];
        all.extend(outcome.survivors.iter().cloned());
        for h in &all {
            println!(
                "  rot {:7.2} tr {:.4} s/s_gt {:.4} | s_r {:.3e} s_psi {:.3e} s_dr {:.3e} s_cov {:.3e} s_tot {:.3e}",
                rot_err(h.pose.rotation(), gt_pose.rotation()),
                (h.pose.translation() - gt_pose.translation()).norm(),
                h.pose.scale() / gt_pose.scale(),
                h.scores.s_r, h.scores.s_psi, h.scores.s_dr, h.scores.s_cov, h.scores.s_tot
            );
        }
    }
}

#[test]
#[ignore]
fn write_box_corpus() {
    let sphere = Mesh::icosphere(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    std::fs::create_dir_all("/tmp/corpus_box").unwrap();
    for i in 0..6 {
        // Tight axis ratios: shape modes must not be able to mimic a 90-degree
        // axis swap. Variation lives in the corner sharpness instead.
        let a: f64 = 1.0;
        let b: f64 = 0.64 + 0.04 * rng.gen::<f64>();
        let c: f64 = 0.40 + 0.04 * rng.gen::<f64>();
        let n = 3.5 + 2.0 * rng.gen::<f64>();
        let verts: Vec<Vector3<f64>> = sphere
            .vertices()
            .iter()
            .map(|v| {
                let u = v.normalize();
                let r = ((u.x / a).abs().powf(n)
                    + (u.y / b).abs().powf(n)
                    + (u.z / c).abs().powf(n))
                .powf(-1.0 / n);
                r * u
            })
            .collect();
        let mesh = sphere.with_vertices(verts).unwrap().normalized_unit_diagonal();
        shapeicp::app::save_obj(&mesh, std::path::Path::new(&format!("/tmp/corpus_box/m{i}.obj"))).unwrap();
    }
}
