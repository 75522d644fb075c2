//! `mirror-splat`: train, render, evaluate and edit mirror-aware Gaussian
//! scenes from the command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use mirror_splat::buffer::ImageBuf;
use mirror_splat::edit::{merge, mirror_surface, reflect_front, MirrorPatch, RigidTransform};
use mirror_splat::io::{load_checkpoint, load_scene, read_plane, save_checkpoint, write_image, write_plane, Scene, Split};
use mirror_splat::metrics::{psnr, ssim};
use mirror_splat::mirror::MirrorPlane;
use mirror_splat::raster::{composite, render, render_composite, RasterSettings, RenderMode};
use mirror_splat::synthetic::{generate_scene, write_dataset};
use mirror_splat::train::{bootstrap_plane, train, write_loss_csv, TrainingConfig};
use mirror_splat::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mirror-splat", version, about = "Gaussian splatting with planar mirror reconstruction")]
struct Cli {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible results. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the three training stages on a dataset.
    Train(TrainArgs),
    /// Render views of a checkpoint to PNG.
    Render(RenderArgs),
    /// Estimate the mirror plane from SfM points and training masks.
    EstimatePlane(EstimatePlaneArgs),
    /// PSNR and SSIM of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Write the mirrored front sub-cloud as a standalone checkpoint.
    Reflect(ReflectArgs),
    /// Insert a second cloud and/or a new mirror surface into a checkpoint.
    Merge(MergeArgs),
    /// Generate a synthetic mirror dataset with ground truth.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or its scene.json.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial mirror plane JSON; estimated from the dataset when absent.
    #[arg(long)]
    plane: Option<PathBuf>,
    #[arg(long)]
    s1: Option<usize>,
    #[arg(long)]
    s2: Option<usize>,
    #[arg(long)]
    s3: Option<usize>,
    #[arg(long)]
    sh_degree: Option<usize>,
    /// Plane-distance threshold for initial mirror labels.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskSource {
    /// Composite with the mask rendered from the mirror labels.
    Rendered,
    /// Composite with the dataset's mask.
    Gt,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    /// Checkpoint PLY.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mirror plane JSON; defaults to the checkpoint's plane sidecar.
    #[arg(long)]
    plane: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    input: CheckpointArgs,
    /// Dataset providing the cameras.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Camera indices to render; overrides --split.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Write only the mask images.
    #[arg(long)]
    mask_only: bool,
    #[arg(long, value_enum, default_value = "rendered")]
    mask_source: MaskSource,
}

#[derive(Debug, Args)]
struct EstimatePlaneArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output plane JSON.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; only its plane-estimation table is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    input: CheckpointArgs,
    #[arg(long)]
    scene: PathBuf,
    /// Metrics CSV; defaults to metrics.csv next to the checkpoint.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "rendered")]
    mask_source: MaskSource,
}

#[derive(Debug, Args)]
struct ReflectArgs {
    #[command(flatten)]
    input: CheckpointArgs,
    /// Output checkpoint. Its plane sidecar holds the plane with flipped
    /// orientation, so reflecting the output again restores the input.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MergeArgs {
    /// Base checkpoint; its plane is kept unless a new mirror is added.
    #[arg(long)]
    a: PathBuf,
    /// Checkpoint inserted into A.
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Rotation applied to B, as a quaternion w,x,y,z.
    #[arg(long, value_parser = parse_list::<4>, allow_hyphen_values = true)]
    rotate: Option<[f64; 4]>,
    /// Translation applied to B after the rotation, as x,y,z.
    #[arg(long, value_parser = parse_list::<3>, allow_hyphen_values = true)]
    translate: Option<[f64; 3]>,
    /// Plane JSON of a new mirror to tile with mirror-labelled Gaussians.
    /// It becomes the plane of the output.
    #[arg(long, requires = "mirror_center")]
    mirror_plane: Option<PathBuf>,
    /// Center of the new mirror, projected onto its plane.
    #[arg(long, value_parser = parse_list::<3>, allow_hyphen_values = true, requires = "mirror_plane")]
    mirror_center: Option<[f64; 3]>,
    /// Half extents of the new mirror along its two in-plane axes.
    #[arg(long, value_parser = parse_list::<2>, default_value = "0.5,0.5")]
    mirror_half_extent: [f64; 2],
    /// Grid spacing of the new mirror's Gaussians.
    #[arg(long, default_value_t = 0.05)]
    mirror_spacing: f64,
    #[arg(long, default_value_t = 0.98)]
    mirror_opacity: f64,
}

#[derive(Debug, Args)]
struct MakeSyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of free-floating object Gaussians.
    #[arg(long, default_value_t = 16)]
    gaussians: usize,
    #[arg(long, default_value_t = 12)]
    cameras: usize,
}

/// `"a,b,c"` -> `[a, b, c]`.
fn parse_list<const N: usize>(text: &str) -> std::result::Result<[f64; N], String> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot set up the thread pool: {e}")))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Train(args) => cmd_train(args, seed),
        Command::Render(args) => cmd_render(args),
        Command::EstimatePlane(args) => cmd_estimate_plane(args, seed),
        Command::Eval(args) => cmd_eval(args),
        Command::Reflect(args) => cmd_reflect(args),
        Command::Merge(args) => cmd_merge(args),
        Command::MakeSynthetic(args) => cmd_make_synthetic(args, seed),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainingConfig> {
    let mut config = match path {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn cmd_train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), seed)?;
    config.s1 = args.s1.unwrap_or(config.s1);
    config.s2 = args.s2.unwrap_or(config.s2);
    config.s3 = args.s3.unwrap_or(config.s3);
    config.sh_degree = args.sh_degree.unwrap_or(config.sh_degree);
    config.tau = args.tau.unwrap_or(config.tau);
    config.validate()?;
    let scene = load_scene(&args.scene)?;
    let plane = args.plane.as_deref().map(read_plane).transpose()?;
    create_dir(&args.out)?;
    std::fs::write(args.out.join("config.toml"), config.to_toml()).map_err(|e| Error::io(args.out.join("config.toml"), e))?;

    let total = config.s1 + config.s2 + config.s3;
    let report_every = (total / 20).max(1);
    let outcome = train(&scene, &config, plane, |row| {
        if row.step % report_every == 0 || row.step == total {
            log::info!(
                "step {}/{} stage {} total loss {:.5} gaussians {}",
                row.step,
                total,
                row.stage,
                row.total,
                row.gaussians
            );
        }
    })?;

    save_checkpoint(&outcome.stage1_cloud, None, &args.out.join("stage1.ply"))?;
    let final_path = args.out.join("point_cloud.ply");
    save_checkpoint(&outcome.state.cloud, outcome.state.plane.as_ref(), &final_path)?;
    write_loss_csv(&outcome.log, &args.out.join("loss.csv"))?;
    println!("wrote {} ({} gaussians)", final_path.display(), outcome.state.cloud.len());
    Ok(())
}

/// The cloud and the plane to render it with: `--plane` wins over the
/// checkpoint's sidecar.
fn load_input(input: &CheckpointArgs) -> Result<(mirror_splat::model::GaussianCloud, Option<MirrorPlane>)> {
    let checkpoint = load_checkpoint(&input.checkpoint)?;
    for w in &checkpoint.warnings {
        log::warn!("{}: {w}", input.checkpoint.display());
    }
    let plane = match &input.plane {
        Some(p) => Some(read_plane(p)?),
        None => checkpoint.plane,
    };
    Ok((checkpoint.cloud, plane))
}

fn split_views(scene: &Scene, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => scene.indices(Split::Train),
        SplitArg::Test => scene.indices(Split::Test),
        SplitArg::All => (0..scene.cameras.len()).collect(),
    }
}

/// Renders view `i`; with `MaskSource::Gt` the passes are composited with
/// the dataset mask instead of the rendered one.
fn render_view(
    cloud: &mirror_splat::model::GaussianCloud,
    plane: Option<&MirrorPlane>,
    scene: &Scene,
    i: usize,
    source: MaskSource,
    settings: &RasterSettings,
) -> Result<(ImageBuf, ImageBuf)> {
    let camera = &scene.cameras[i];
    match (plane, source) {
        (Some(plane), MaskSource::Gt) => {
            let (real, _) = render(cloud, camera, RenderMode::LabelModulated, None, settings)?;
            let (mirror, _) = render(cloud, camera, RenderMode::Standard, Some(plane), settings)?;
            let color = composite(&real, &mirror, &scene.masks[i])?;
            Ok((color, real.mask))
        }
        _ => render_composite(cloud, plane, camera, settings),
    }
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let (cloud, plane) = load_input(&args.input)?;
    let scene = load_scene(&args.scene)?;
    let views = if args.views.is_empty() {
        split_views(&scene, args.split)
    } else {
        args.views.clone()
    };
    if let Some(&bad) = views.iter().find(|&&i| i >= scene.cameras.len()) {
        return Err(Error::Usage(format!(
            "unknown camera id {bad}; the scene has {} cameras",
            scene.cameras.len()
        )));
    }
    create_dir(&args.out)?;
    let settings = RasterSettings::default();
    for i in views {
        let (color, mask) = if args.mask_only {
            let (out, _) = render(&cloud, &scene.cameras[i], RenderMode::MaskOnly, None, &settings)?;
            (None, out.mask)
        } else {
            let (color, mask) = render_view(&cloud, plane.as_ref(), &scene, i, args.mask_source, &settings)?;
            (Some(color), mask)
        };
        if let Some(color) = color {
            write_image(&color, &args.out.join(format!("view_{i:03}.png")))?;
        }
        write_image(&mask, &args.out.join(format!("mask_{i:03}.png")))?;
    }
    Ok(())
}

fn cmd_estimate_plane(args: EstimatePlaneArgs, seed: Option<u64>) -> Result<()> {
    let config = load_config(args.config.as_deref(), seed)?;
    let scene = load_scene(&args.scene)?;
    let plane = bootstrap_plane(&scene, &config)?;
    write_plane(&plane, &args.out)?;
    println!(
        "n = ({:.6}, {:.6}, {:.6}), b = {:.6}",
        plane.normal.x, plane.normal.y, plane.normal.z, plane.offset
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (cloud, plane) = load_input(&args.input)?;
    let scene = load_scene(&args.scene)?;
    let views = scene.indices(Split::Test);
    if views.is_empty() {
        return Err(Error::Usage("the scene has no test views".into()));
    }
    let settings = RasterSettings::default();
    let mut rows = Vec::with_capacity(views.len());
    for &i in &views {
        let (color, _) = render_view(&cloud, plane.as_ref(), &scene, i, args.mask_source, &settings)?;
        rows.push((i, psnr(&color, &scene.images[i])?, ssim(&color, &scene.images[i])?));
    }
    let csv_path = args
        .csv
        .unwrap_or_else(|| args.input.checkpoint.with_file_name("metrics.csv"));
    let mut csv = String::from("view_id,psnr,ssim\n");
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "{:>8} {:>10} {:>8}", "view", "psnr", "ssim");
    for &(i, p, s) in &rows {
        csv.push_str(&format!("{i},{p},{s}\n"));
        let _ = writeln!(out, "{i:>8} {p:>10.4} {s:>8.5}");
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let _ = writeln!(out, "{:>8} {mean_psnr:>10.4} {mean_ssim:>8.5}", "mean");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}

fn cmd_reflect(args: ReflectArgs) -> Result<()> {
    let (cloud, plane) = load_input(&args.input)?;
    let plane = plane.ok_or_else(|| {
        Error::Usage(format!(
            "{} has no plane sidecar; pass --plane",
            args.input.checkpoint.display()
        ))
    })?;
    let (mirrored, flipped) = reflect_front(&cloud, &plane)?;
    save_checkpoint(&mirrored, Some(&flipped), &args.out)?;
    println!("wrote {} ({} of {} gaussians)", args.out.display(), mirrored.len(), cloud.len());
    Ok(())
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let a = load_checkpoint(&args.a)?;
    let mut plane = a.plane;
    let mut cloud = a.cloud;
    if let Some(b_path) = &args.b {
        let b = load_checkpoint(b_path)?;
        let rotation = args.rotate.unwrap_or([1.0, 0.0, 0.0, 0.0]);
        let translation = args.translate.unwrap_or([0.0; 3]);
        let transform = RigidTransform::from_parts(rotation, translation)?;
        cloud = merge(&cloud, &b.cloud, &transform);
    } else if args.rotate.is_some() || args.translate.is_some() {
        return Err(Error::Usage("--rotate and --translate apply to --b, which is missing".into()));
    }
    if let (Some(plane_path), Some(center)) = (&args.mirror_plane, &args.mirror_center) {
        let new_plane = read_plane(plane_path)?;
        let patch = MirrorPatch {
            center: Vector3::from(*center),
            half_extent: (args.mirror_half_extent[0], args.mirror_half_extent[1]),
            spacing: args.mirror_spacing,
            opacity: args.mirror_opacity,
        };
        let surface = mirror_surface(&new_plane, &patch, cloud.sh_degree)?;
        log::info!("adding {} mirror gaussians", surface.len());
        cloud = merge(&cloud, &surface, &RigidTransform::identity());
        plane = Some(new_plane);
    } else if args.b.is_none() {
        return Err(Error::Usage("nothing to merge: pass --b and/or --mirror-plane".into()));
    }
    save_checkpoint(&cloud, plane.as_ref(), &args.out)?;
    println!("wrote {} ({} gaussians)", args.out.display(), cloud.len());
    Ok(())
}

fn cmd_make_synthetic(args: MakeSyntheticArgs, seed: Option<u64>) -> Result<()> {
    if args.cameras == 0 {
        return Err(Error::Usage("--cameras must be at least 1".into()));
    }
    let scene = generate_scene(seed.unwrap_or(0), args.gaussians, args.cameras);
    let manifest = write_dataset(&scene, &args.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}
