use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use meshdeform::fixtures::{synthetic_image, unit_cube_target, write_all};
use meshdeform::imageio::{load_image, load_mask};
use meshdeform::loss::loss_csv;
use meshdeform::lss::{linear_scale_search, parse_grid, validate_grid, SilhouetteIou};
use meshdeform::mesh::{bundled_template, unpool_mesh, TriMesh};
use meshdeform::model::{ModelConfig, TdmModel};
use meshdeform::obj::write_obj_file;
use meshdeform::perception::Camera;
use meshdeform::pointcloud::PointCloud;
use meshdeform::train::{overfit_train, TrainConfig};
use meshdeform::verify::{gradient_suite, pipeline_gradcheck, TOLERANCE};

mod exit;

use exit::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "meshdeform", version, about = "Coarse-to-fine mesh deformation from a single image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a mesh from an image and object mask, searching the border scale.
    Reconstruct(ReconstructArgs),
    /// Fit a fresh model to one target point cloud and write the loss curve.
    Overfit(OverfitArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write the seeded test fixtures.
    Fixtures(FixturesArgs),
    /// Print the vertex counts of the template and its three subdivisions.
    UnpoolTrace,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint directory; overrides --width.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Token width of a freshly initialized model.
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReconstructArgs {
    /// PNG, or raw 224x224x3 f32 with a .f32/.raw/.bin extension.
    #[arg(long)]
    image: PathBuf,
    /// PNG mask; any nonzero pixel belongs to the object.
    #[arg(long)]
    mask: PathBuf,
    /// Camera config file (key = value lines).
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated border scales.
    #[arg(long, default_value = "0.2,0.25,0.3,0.35,0.4")]
    grid: String,
    /// Allow scales outside [0.2, 0.4].
    #[arg(long)]
    wide_grid: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct OverfitArgs {
    /// Target point cloud (`x y z nx ny nz` lines); defaults to the seeded unit cube.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Input image; defaults to the seeded synthetic image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also check the whole pipeline on this many sampled coordinates.
    #[arg(long)]
    pipeline: Option<usize>,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Reconstruct(a) => reconstruct(a),
        Command::Overfit(a) => overfit(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Fixtures(a) => fixtures(a),
        Command::UnpoolTrace => unpool_trace(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load_camera(path: Option<&Path>) -> CliResult<Camera> {
    Ok(match path {
        Some(p) => Camera::load(p)?,
        None => Camera::default(),
    })
}

fn load_model(args: &ModelArgs) -> CliResult<TdmModel> {
    let model = match &args.checkpoint {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::Missing(dir.clone()));
            }
            TdmModel::load_checkpoint(dir)?
        }
        None => TdmModel::new(ModelConfig::desk().with_width(args.width))?,
    };
    info!("model width {} with {} parameters", model.cfg.width, model.store.num_values());
    Ok(model)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_stage_meshes(dir: &Path, meshes: &[TriMesh]) -> CliResult<()> {
    for (i, m) in meshes.iter().enumerate() {
        write_obj_file(&dir.join(format!("stage{}.obj", i + 1)), m)?;
    }
    write_obj_file(&dir.join("mesh.obj"), meshes.last().expect("four meshes"))?;
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let grid = parse_grid(&a.grid)?;
    validate_grid(&grid, a.wide_grid)?;
    for p in [&a.image, &a.mask] {
        if !p.is_file() {
            return Err(CliError::Missing(p.clone()));
        }
    }
    let image = load_image(&a.image)?;
    let mask = load_mask(&a.mask)?;
    let camera = load_camera(a.camera.as_deref())?;
    let model = load_model(&a.model)?;

    let res = linear_scale_search(&image, &mask, &camera, &model, &grid, a.model.seed, &SilhouetteIou)?;
    create_dir(&a.out_dir)?;
    write_stage_meshes(&a.out_dir, &res.meshes)?;
    let report = serde_json::to_string_pretty(&res.report()).expect("report serializes");
    write_text(&a.out_dir.join("report.json"), &report)?;

    for row in &res.table {
        match (row.score, &row.error) {
            (Some(score), _) => println!("s={:.2} p={} score={score:.4}", row.s, row.p),
            (None, Some(err)) => println!("s={:.2} p={} failed: {err}", row.s, row.p),
            (None, None) => println!("s={:.2} p={}", row.s, row.p),
        }
    }
    println!("chosen s={} -> {}", res.chosen_s(), a.out_dir.join("mesh.obj").display());
    Ok(())
}

fn overfit(a: OverfitArgs) -> CliResult<()> {
    let target = match &a.target {
        Some(p) => PointCloud::load(p)?,
        None => unit_cube_target(a.seed),
    };
    let image = match &a.image {
        Some(p) => load_image(p)?,
        None => synthetic_image(a.seed),
    };
    let camera = load_camera(a.camera.as_deref())?;
    let desk = TrainConfig::desk();
    let cfg = TrainConfig {
        model: ModelConfig {
            seed: a.seed,
            ..desk.model.clone().with_width(a.width)
        },
        steps: a.steps,
        lr: a.lr.unwrap_or(desk.lr),
        backbone_seed: a.seed,
        ..desk
    };
    let start = Instant::now();
    let out = overfit_train(&target, &image, &camera, &cfg)?;
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("loss.csv"), &loss_csv(&out.curve))?;
    write_stage_meshes(&a.out_dir, &out.meshes)?;
    out.model.save_checkpoint(&a.out_dir.join("checkpoint"))?;
    let (first, last) = (out.initial().total, out.last().total);
    println!(
        "{} steps in {:.1}s: total {first:.4} -> {last:.4} (ratio {:.3})",
        cfg.steps,
        start.elapsed().as_secs_f64(),
        last / first
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let mut results = gradient_suite(a.width, a.seed)?;
    if let Some(coords) = a.pipeline {
        results.push(pipeline_gradcheck(a.width, coords, a.seed)?);
    }
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>10.3e} over {:>4} coords  {verdict}", r.name, r.max_rel_error, r.coords);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(CliError::Check(format!(
            "{failed} of {} checks exceed relative error {TOLERANCE:e}",
            results.len()
        )));
    }
    Ok(())
}

fn fixtures(a: FixturesArgs) -> CliResult<()> {
    for p in write_all(&a.out_dir, a.seed)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn unpool_trace() -> CliResult<()> {
    let mut mesh = bundled_template();
    let mut counts = vec![mesh.num_vertices()];
    for _ in 0..3 {
        mesh = unpool_mesh(&mesh);
        counts.push(mesh.num_vertices());
    }
    let line: Vec<String> = counts.iter().map(usize::to_string).collect();
    println!("{}", line.join(" "));
    Ok(())
}
