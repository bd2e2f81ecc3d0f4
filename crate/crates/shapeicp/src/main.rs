use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapeicp::app::{
    self, AppConfig, AppError, EvaluationRecord, OrientedBox, PoseRecord,
};
use shapeicp::asm::{build_asm, load_asm_file, save_asm_file, ShapeCode};
use shapeicp::geometry::Sim3Pose;
use shapeicp::scoring::CameraIntrinsics;
use shapeicp::solver::{self, RenderContext};

#[derive(Parser)]
#[command(
    name = "shapeicp",
    version,
    about = "Category-level pose and shape estimation from depth images"
)]
struct Cli {
    /// JSON config file overriding solver/deformation/preprocessing defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for scene-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Seed override for randomized operations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Active shape model operations.
    Asm {
        #[command(subcommand)]
        cmd: AsmCmd,
    },
    /// Estimate pose and shape for every scene in a directory.
    Estimate(EstimateArgs),
    /// Generate synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Summarize estimation results into a metrics CSV.
    Eval(EvalArgs),
    /// Render a model to a 16-bit depth PNG.
    Render(RenderArgs),
}

#[derive(Subcommand)]
enum AsmCmd {
    /// Build a model from a directory of registered OBJ meshes.
    Build {
        /// Directory of .obj meshes sharing one topology.
        #[arg(long)]
        meshes: PathBuf,
        /// Number of PCA basis shapes to keep.
        #[arg(long)]
        k: usize,
        /// Category label stored in the model.
        #[arg(long, default_value = "object")]
        category: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of a stored model.
    Inspect {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct EstimateArgs {
    /// Directory of scenes written by `synth` (or the same layout).
    #[arg(long)]
    scenes: PathBuf,
    /// SASM1 model file.
    #[arg(long)]
    asm: PathBuf,
    /// Output JSON-lines results file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    asm: PathBuf,
    /// Number of scenes to generate.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian depth noise, meters.
    #[arg(long, default_value_t = 0.002)]
    noise_std: f64,
    /// Fraction of the object mask hidden by a contiguous occluder.
    #[arg(long, default_value_t = 0.1)]
    occlusion: f64,
    /// Image width/height and focal length of the synthetic camera.
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 160.0)]
    focal: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines results from `estimate`.
    #[arg(long)]
    results: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    asm: PathBuf,
    /// Comma-separated shape code; the mean code when omitted.
    #[arg(long)]
    code: Option<String>,
    /// Camera distance to the object center, meters.
    #[arg(long, default_value_t = 1.0)]
    distance: f64,
    /// Object scale (meters per unit-diagonal model).
    #[arg(long, default_value_t = 0.25)]
    scale: f64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 192)]
    height: usize,
    #[arg(long, default_value_t = 320.0)]
    focal: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    // Exit 1 for usage problems (clap's own default would be 2).
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                AppError::Solver(solver::SolverError::AllHypothesesDead { .. }) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<AppConfig, AppError> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(AppConfig::default()),
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.solver.seed = seed;
    }
    match cli.cmd {
        Cmd::Asm { cmd } => run_asm(cmd),
        Cmd::Estimate(args) => run_estimate(args, &config, cli.jobs),
        Cmd::Synth(args) => run_synth(args, cli.seed.unwrap_or(0)),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Render(args) => run_render(args),
    }
}

fn run_asm(cmd: AsmCmd) -> Result<(), AppError> {
    match cmd {
        AsmCmd::Build {
            meshes,
            k,
            category,
            out,
        } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&meshes)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "obj"))
                .collect();
            paths.sort();
            let corpus: Vec<_> = paths
                .iter()
                .map(|p| app::load_obj(p))
                .collect::<Result<_, _>>()?;
            let asm = build_asm(&category, &corpus, k)?;
            save_asm_file(&asm, &out)?;
            println!(
                "built {category}: {} meshes, V={}, K={}, wrote {}",
                corpus.len(),
                asm.vertex_count(),
                k,
                out.display()
            );
            Ok(())
        }
        AsmCmd::Inspect { input } => {
            let asm = load_asm_file(&input)?;
            println!("category: {}", asm.category());
            println!("V={}", asm.vertex_count());
            println!("F={}", asm.faces().len());
            println!("K={}", asm.basis_count());
            println!("U={}", asm.training_count());
            let svals: Vec<String> = asm
                .singular_values()
                .iter()
                .map(|s| format!("{s:.4e}"))
                .collect();
            println!("singular values: {}", svals.join(", "));
            Ok(())
        }
    }
}

fn estimate_scene(
    dir: &Path,
    stem: &str,
    asm: &shapeicp::asm::ActiveShapeModel,
    config: &AppConfig,
) -> Result<EvaluationRecord, AppError> {
    let start = Instant::now();
    let (obs, gt) = app::load_scene(dir, stem)?;
    let gt = gt.ok_or_else(|| AppError::Format {
        path: dir.join(stem).display().to_string(),
        detail: "scene has no ground truth".into(),
    })?;
    let mut record = EvaluationRecord {
        scene: stem.to_string(),
        category: obs.category.clone(),
        skipped: false,
        gt_pose: gt.pose.clone(),
        gt_code: gt.code.clone(),
        est_pose: None,
        est_code: None,
        rotation_error_deg: None,
        translation_error_m: None,
        scale_error_rel: None,
        iou_3d: None,
        chamfer: None,
        runtime_s: 0.0,
    };
    let cloud = match app::back_project(&obs) {
        Ok(c) => c,
        Err(AppError::EmptyMask) => {
            record.skipped = true;
            record.runtime_s = start.elapsed().as_secs_f64();
            return Ok(record);
        }
        Err(e) => return Err(e),
    };
    let cloud = match app::remove_outliers(&cloud, config.outlier_k, config.outlier_alpha) {
        Ok(c) => c,
        Err(AppError::TooFewPoints { .. }) => {
            record.skipped = true;
            record.runtime_s = start.elapsed().as_secs_f64();
            return Ok(record);
        }
        Err(e) => return Err(e),
    };
    if !app::gate_detection(&cloud, config.min_points) {
        record.skipped = true;
        record.runtime_s = start.elapsed().as_secs_f64();
        return Ok(record);
    }
    let spec = config.catalog().spec_for(&obs.category);
    let masked = obs.masked_depth();
    let outcome = solver::run(
        &cloud,
        asm,
        &spec,
        Some(RenderContext {
            cam: &obs.cam,
            observed: &masked,
        }),
        &config.solver,
        None,
    )?;
    let best = outcome.best;
    let gt_pose = gt.pose.to_pose()?;
    let (rot, trans, scale) = app::pose_errors(&best.pose, &gt_pose, &spec);
    let est_mesh = asm.reconstruct(&best.code)?;
    let gt_code = ShapeCode::from_vec(gt.code.clone());
    let gt_mesh = asm.reconstruct(&gt_code)?;
    let iou = app::iou3d(
        &OrientedBox::from_posed_mesh(&best.pose, &est_mesh)?,
        &OrientedBox::from_posed_mesh(&gt_pose, &gt_mesh)?,
    )?;
    let chamfer = app::chamfer_metric(&est_mesh, &gt_mesh, 2000)?;
    record.est_pose = Some(PoseRecord::from_pose(&best.pose));
    record.est_code = Some(best.code.0.iter().copied().collect());
    record.rotation_error_deg = Some(rot);
    record.translation_error_m = Some(trans);
    record.scale_error_rel = Some(scale);
    record.iou_3d = Some(iou);
    record.chamfer = Some(chamfer);
    record.runtime_s = start.elapsed().as_secs_f64();
    Ok(record)
}

fn run_estimate(args: EstimateArgs, config: &AppConfig, jobs: usize) -> Result<(), AppError> {
    let asm = load_asm_file(&args.asm)?;
    let stems = app::list_scenes(&args.scenes)?;
    let jobs = jobs.max(1);
    // Scene-level parallelism; results keep scene order regardless of the
    // worker count.
    let mut results: Vec<Option<Result<EvaluationRecord, AppError>>> =
        (0..stems.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..jobs {
            let stems = &stems;
            let asm = &asm;
            let dir = args.scenes.as_path();
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for i in (worker..stems.len()).step_by(jobs) {
                    out.push((i, estimate_scene(dir, &stems[i], asm, config)));
                }
                out
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("estimation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut file = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let mut done = 0usize;
    let mut skipped = 0usize;
    for r in results.into_iter().flatten() {
        let record = r?;
        if record.skipped {
            skipped += 1;
            eprintln!("scene {}: skipped (detection gate)", record.scene);
        } else {
            done += 1;
            eprintln!(
                "scene {}: rot {:.2} deg, trans {:.4} m, {:.1}s",
                record.scene,
                record.rotation_error_deg.unwrap_or(f64::NAN),
                record.translation_error_m.unwrap_or(f64::NAN),
                record.runtime_s
            );
        }
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    eprintln!("estimated {done} scenes, skipped {skipped}");
    Ok(())
}

fn run_synth(args: SynthArgs, seed: u64) -> Result<(), AppError> {
    let asm = load_asm_file(&args.asm)?;
    let cam = CameraIntrinsics {
        fx: args.focal,
        fy: args.focal,
        cx: args.width as f64 / 2.0,
        cy: args.height as f64 / 2.0,
        width: args.width,
        height: args.height,
        depth_scale: 1e-4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..args.n {
        let axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        );
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let pose = Sim3Pose::new(
            Sim3Pose::rotation_about(axis, angle),
            Vector3::new(
                (rng.gen::<f64>() - 0.5) * 0.1,
                (rng.gen::<f64>() - 0.5) * 0.1,
                0.9 + 0.2 * rng.gen::<f64>(),
            ),
            0.2 + 0.1 * rng.gen::<f64>(),
        )?;
        let code = asm.training_code(rng.gen_range(0..asm.training_count()));
        let (obs, gt) = app::synth_scene(
            &asm,
            &pose,
            &code,
            &cam,
            args.noise_std,
            args.occlusion,
            seed.wrapping_add(1000 + i as u64),
        )?;
        app::save_scene(&args.out, &format!("scene_{i:04}"), &obs, Some(&gt))?;
    }
    println!("wrote {} scenes to {}", args.n, args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), AppError> {
    let text = std::fs::read_to_string(&args.results)?;
    let records: Vec<EvaluationRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let csv = app::summarize(&records);
    std::fs::write(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_render(args: RenderArgs) -> Result<(), AppError> {
    let asm = load_asm_file(&args.asm)?;
    let code = match &args.code {
        Some(text) => {
            let values: Vec<f64> = text
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|e| AppError::Format {
                        path: "--code".into(),
                        detail: format!("{e}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            ShapeCode::from_vec(values)
        }
        None => asm.mean_code()?,
    };
    let mesh = asm.reconstruct(&code)?;
    let cam = CameraIntrinsics {
        fx: args.focal,
        fy: args.focal,
        cx: args.width as f64 / 2.0,
        cy: args.height as f64 / 2.0,
        width: args.width,
        height: args.height,
        depth_scale: 1e-4,
    };
    let pose = Sim3Pose::new(
        nalgebra::Matrix3::identity(),
        Vector3::new(0.0, 0.0, args.distance),
        args.scale,
    )?;
    let image = shapeicp::scoring::render_depth(&pose, &mesh, &cam)?;
    let mut out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        cam.width as u32,
        cam.height as u32,
    );
    for v in 0..cam.height {
        for u in 0..cam.width {
            let units =
                (image.get(u, v) / cam.depth_scale).round().clamp(0.0, u16::MAX as f64);
            out.put_pixel(u as u32, v as u32, image::Luma([units as u16]));
        }
    }
    out.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
