//! Batch command-line interface. Every command reads its inputs, validates
//! flags before doing any work, and writes fixed-name outputs under `--out`
//! through write-then-rename.

use crate::atomic::write_atomic;
use crate::augment::{augment_background, random_intrinsics, random_pose, PoseSampleConfig};
use crate::geometry::Camera;
use crate::grid::{BackgroundModel, SparseVoxelGrid, SH_DIM};
use crate::pipeline::{
    assign_split, filter_connected_components, init_grid_from_points, psnr, select_frames, ssim, PipelineError,
    SceneManifest, Split, BLUR_THRESHOLD, CC_CELL, CC_MIN_FRACTION, INIT_DENSITY, MAX_FRAMES, TEST_FRACTION,
};
use crate::raster::Raster;
use crate::render::{render_image, RenderConfig};
use crate::serialization::{quantize, QuantizedScene, HEADER_BYTES};
use crate::synthetic::{heldout_rig, training_rig, ColoredCube};
use crate::train::{train, write_loss_log, Optimizer, TrainConfig, TrainError, TrainingView};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DEFECTIVE: i32 = 3;

pub const FROZEN_MANIFEST_FILE: &str = "manifest.frozen.json";
pub const SPLIT_FILE: &str = "split.json";
pub const SCENE_FILE: &str = "scene.prfx";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";
pub const POSES_FILE: &str = "poses.json";
pub const AUGMENT_FILE: &str = "augment.csv";
pub const INFO_FILE: &str = "info.json";
pub const SYNTH_MANIFEST_FILE: &str = "manifest.json";

pub const METRICS_HEADER: &str = "scene_id,psnr,ssim,train_time_s,n_voxels,file_bytes";
pub const PSNR_THRESHOLDS: [f64; 3] = [15.0, 20.0, 25.0];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("scene {scene} is defective: {reason}")]
    Defective { scene: String, reason: String },
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Defective { .. } => EXIT_DEFECTIVE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Defective { scene, reason } => CliError::Defective { scene, reason },
            e => CliError::Runtime(e.into()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.into())
            }
        }
    )*};
}
runtime_from!(
    crate::serialization::SerializationError,
    crate::augment::AugmentError,
    crate::raster::RasterError,
    crate::grid::GridError,
    std::io::Error
);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(msg) => CliError::Usage(msg),
            e => CliError::Runtime(e.into()),
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "perfield", version, about = "Sparse-voxel radiance field training and dataset tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blur-filter, cap and split a raw manifest into a frozen one.
    Ingest(IngestArgs),
    /// Train a scene and write the quantized container plus metrics.
    Train(TrainArgs),
    /// Render the frames of a manifest (or sampled poses) from a scene file.
    Render(RenderArgs),
    /// PSNR/SSIM with a threshold histogram.
    Eval(EvalArgs),
    /// Sample novel poses between nearby training cameras.
    PoseSample(PoseSampleArgs),
    /// Render a scene with another scene's background substituted at random.
    AugmentBg(AugmentArgs),
    /// Describe a scene file and its storage breakdown.
    Info(InfoArgs),
    /// Write the synthetic colored-cube dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = BLUR_THRESHOLD)]
    pub blur_threshold: f64,
    #[arg(long, default_value_t = MAX_FRAMES)]
    pub max_frames: usize,
    #[arg(long, default_value_t = TEST_FRACTION)]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Dense 128³ start, upsampling, background on.
    Object,
    /// Depth-seeded 256³ start, no background.
    Indoor,
    /// Dense 64³ start without background, tuned for the colored cube.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Rmsprop,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Frozen manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Object)]
    pub profile: Profile,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Total steps; the profile's upsample, prune and foreground-skip steps
    /// scale along.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial grid resolution per axis.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub prune_threshold: Option<f64>,
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub lr_density: Option<f64>,
    #[arg(long)]
    pub lr_sh: Option<f64>,
    /// Final learning-rate multiplier of the log-linear decay.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub tv_density: Option<f64>,
    #[arg(long)]
    pub tv_sh: Option<f64>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub bg_layers: Option<usize>,
    #[arg(long)]
    pub bg_resolution: Option<usize>,
    #[arg(long)]
    pub no_background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Poses written by `pose-sample`; used instead of manifest frames.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene file to render against the test frames of `--manifest`.
    #[arg(long, requires = "manifest")]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of rendered PNGs, paired by file name with `--reference`.
    #[arg(long, requires = "reference")]
    pub rendered: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// metrics.csv files from `train`, one row per scene.
    #[arg(long, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct PoseSampleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Radians.
    #[arg(long)]
    pub rotation_threshold: Option<f64>,
    /// Squared world units.
    #[arg(long)]
    pub translation_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Scene whose foreground is kept.
    #[arg(long)]
    pub scene: PathBuf,
    /// Scene that lends its background.
    #[arg(long)]
    pub background_scene: PathBuf,
    /// Supplies the cameras (frames of `--split`).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub bg_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 2)]
    pub test_views: usize,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

/// Runs one command and returns what it prints on success.
pub fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Render(a) => with_workers(a.workers, || cmd_render(&a)),
        Command::Eval(a) => with_workers(a.workers, || cmd_eval(&a)),
        Command::PoseSample(a) => cmd_pose_sample(&a),
        Command::AugmentBg(a) => with_workers(a.workers, || cmd_augment_bg(&a)),
        Command::Info(a) => cmd_info(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn with_workers<T>(workers: usize, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError>
where
    T: Send,
{
    if workers == 0 {
        return usage("--workers must be at least 1");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| anyhow::anyhow!(e))?;
    pool.install(f)
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("cannot create {}: {e}", dir.display()).into())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()).into())
}

#[derive(Debug, Serialize)]
struct SplitFile<'a> {
    scene_id: &'a str,
    seed: u64,
    train: Vec<usize>,
    test: Vec<usize>,
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<String, CliError> {
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return usage(format!("--test-fraction must lie in (0, 1), got {}", a.test_fraction));
    }
    if a.max_frames == 0 {
        return usage("--max-frames must be positive");
    }
    if !a.blur_threshold.is_finite() {
        return usage("--blur-threshold must be finite");
    }
    let mut m = SceneManifest::load(&a.manifest)?;
    let n = m.frames.len();
    if n <= a.max_frames {
        m.compute_blur_scores()?;
    }
    let selected = select_frames(&m, a.max_frames, a.blur_threshold)?;
    let mut frozen = assign_split(&selected, a.test_fraction, a.seed);
    frozen.check_frozen()?;
    create_out(&a.out)?;
    frozen.rebase(&a.out);
    let split = SplitFile {
        scene_id: &frozen.scene_id,
        seed: a.seed,
        train: frozen.indices(Split::Train),
        test: frozen.indices(Split::Test),
    };
    let split_json = serde_json::to_string_pretty(&split).expect("split serializes") + "\n";
    frozen.save(&a.out.join(FROZEN_MANIFEST_FILE))?;
    write_text(&a.out.join(SPLIT_FILE), &split_json)?;
    Ok(format!(
        "scene {}: kept {} of {n} frames ({} train, {} test)\n",
        frozen.scene_id,
        frozen.frames.len(),
        split.train.len(),
        split.test.len()
    ))
}

/// The profile's training recipe with the flag overrides applied.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match a.profile {
        Profile::Object => TrainConfig::object_profile(),
        Profile::Indoor => TrainConfig::indoor_profile(),
        Profile::Synthetic => synthetic_profile(),
    };
    if let Some(steps) = a.steps {
        if steps == 0 {
            return usage("--steps must be positive");
        }
        let scale = |s: Option<usize>| s.map(|s| (s as u128 * steps as u128 / cfg.total_steps as u128) as usize);
        cfg.upsample_at = scale(cfg.upsample_at);
        cfg.prune_at = scale(cfg.prune_at);
        cfg.fg_skip_steps = scale(Some(cfg.fg_skip_steps)).unwrap_or(0);
        cfg.total_steps = steps;
    }
    if let Some(t) = a.prune_threshold {
        cfg.prune_threshold = t;
    }
    if let Some(r) = a.rays {
        cfg.rays_per_batch = r;
    }
    if let Some(o) = a.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Rmsprop => Optimizer::rmsprop(),
        };
    }
    let set = |dst: &mut f64, src: Option<f64>| {
        if let Some(v) = src {
            *dst = v;
        }
    };
    set(&mut cfg.lr_density, a.lr_density);
    set(&mut cfg.lr_sh, a.lr_sh);
    set(&mut cfg.lr_final_ratio, a.lr_decay);
    set(&mut cfg.lambda_tv_density, a.tv_density);
    set(&mut cfg.lambda_tv_sh, a.tv_sh);
    set(&mut cfg.lambda_sparsity, a.sparsity);
    set(&mut cfg.lambda_beta, a.beta);
    cfg.rng_seed = a.seed;
    cfg.workers = a.workers;
    cfg.validate()?;
    Ok(cfg)
}

/// Recipe for the desk-scale colored cube: no upsampling or pruning, RMSprop,
/// no TV.
pub fn synthetic_profile() -> TrainConfig {
    TrainConfig {
        total_steps: 5000,
        upsample_at: None,
        prune_at: None,
        fg_skip_steps: 0,
        rays_per_batch: SYNTHETIC_RAYS,
        optimizer: Optimizer::rmsprop(),
        lr_density: 1.0,
        lr_sh: 1e-2,
        lambda_tv_density: 1e-8,
        lambda_tv_sh: 1e-7,
        lr_final_ratio: 0.1,
        ..TrainConfig::default()
    }
}

const SYNTHETIC_RAYS: usize = 1024;
const OBJECT_RESOLUTION: usize = 128;
const INDOOR_RESOLUTION: usize = 256;
const SYNTHETIC_RESOLUTION: usize = 64;
const BG_LAYERS: usize = 16;
const BG_RESOLUTION: usize = 512;
const BG_BRIGHTNESS: f64 = 0.5;

fn initial_scene(
    a: &TrainArgs,
    m: &SceneManifest,
) -> Result<(SparseVoxelGrid, Option<BackgroundModel>), CliError> {
    let dense = |res: usize| -> Result<SparseVoxelGrid, CliError> {
        let Some((lo, hi)) = m.world_bounds() else {
            return usage(format!("profile {:?} needs manifest bounds", a.profile));
        };
        Ok(SparseVoxelGrid::dense([res; 3], lo, hi, INIT_DENSITY, &[0.0; SH_DIM])?)
    };
    let (grid, wants_bg) = match a.profile {
        Profile::Object => (dense(a.resolution.unwrap_or(OBJECT_RESOLUTION))?, true),
        Profile::Synthetic => (dense(a.resolution.unwrap_or(SYNTHETIC_RESOLUTION))?, false),
        Profile::Indoor => {
            if let Some(i) = (0..m.frames.len()).find(|&i| m.frames[i].depth.is_none()) {
                return Err(PipelineError::MissingDepth { frame: i }.into());
            }
            let points = filter_connected_components(&m.depth_points()?, CC_CELL, CC_MIN_FRACTION)?;
            info!("{} depth points after component filtering", points.len());
            (init_grid_from_points(&points, a.resolution.unwrap_or(INDOOR_RESOLUTION))?, false)
        }
    };
    let bg = if wants_bg && !a.no_background {
        Some(BackgroundModel::new(
            a.bg_layers.unwrap_or(BG_LAYERS),
            a.bg_resolution.unwrap_or(BG_RESOLUTION),
            BG_BRIGHTNESS,
            grid.center(),
            grid.bounding_radius(),
        )?)
    } else {
        None
    };
    Ok((grid, bg))
}

/// Mean PSNR and SSIM of a scene over views.
fn evaluate(grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>, views: &[TrainingView]) -> Result<(f64, f64), CliError> {
    let cfg = RenderConfig { use_background: bg.is_some(), ..RenderConfig::default() };
    let mut p = 0.0;
    let mut s = 0.0;
    for v in views {
        let img = render_image(grid, bg, &v.camera, &cfg);
        p += psnr(&img, &v.image)?;
        s += ssim(&img, &v.image)?;
    }
    Ok((p / views.len() as f64, s / views.len() as f64))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String, CliError> {
    if a.workers == 0 {
        return usage("--workers must be at least 1");
    }
    for (flag, v) in [("--resolution", a.resolution), ("--bg-layers", a.bg_layers), ("--bg-resolution", a.bg_resolution)] {
        if v == Some(0) {
            return usage(format!("{flag} must be positive"));
        }
    }
    let cfg = train_config(a)?;
    let m = SceneManifest::load(&a.manifest)?;
    m.check_frozen()?;
    let (grid, bg) = initial_scene(a, &m)?;
    let views = m.load_views(Split::Train)?;
    create_out(&a.out)?;
    let render = RenderConfig { use_background: bg.is_some(), ..RenderConfig::default() };
    info!("training {} on {} views, {} voxels, {} steps", m.scene_id, views.len(), grid.len(), cfg.total_steps);
    let start = Instant::now();
    let out = train(&views, grid, bg, &cfg, &render)?;
    let train_time = start.elapsed().as_secs_f64();

    let scene = quantize(&out.grid, out.background.as_ref())?;
    let scene_path = a.out.join(SCENE_FILE);
    scene.write(&scene_path)?;
    let file_bytes = std::fs::metadata(&scene_path)?.len();
    let mut loss = Vec::new();
    write_loss_log(&out.log, &mut loss)?;
    write_atomic(&a.out.join(LOSS_FILE), &loss)?;

    let (qgrid, qbg) = scene.dequantize()?;
    let mut eval_views = m.load_views(Split::Test)?;
    if eval_views.is_empty() {
        log::warn!("no test frames; metrics are measured on the training frames");
        eval_views = views;
    }
    let (p, s) = evaluate(&qgrid, qbg.as_ref(), &eval_views)?;
    let row = format!("{},{p:.6},{s:.6},{train_time:.3},{},{file_bytes}\n", csv_field(&m.scene_id), scene.len());
    write_text(&a.out.join(METRICS_FILE), &format!("{METRICS_HEADER}\n{row}"))?;
    Ok(format!("{METRICS_HEADER}\n{row}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_indices(m: &SceneManifest, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => m.indices(Split::Train),
        SplitArg::Test => m.indices(Split::Test),
        SplitArg::All => (0..m.frames.len()).collect(),
    }
}

fn load_scene(path: &Path) -> Result<(SparseVoxelGrid, Option<BackgroundModel>), CliError> {
    Ok(QuantizedScene::read(path)?.dequantize()?)
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct PoseRecord {
    pub c2w: [f64; 16],
    pub intrinsics: crate::geometry::Intrinsics,
    pub pair: [usize; 2],
    pub s: f64,
}

fn read_poses(path: &Path) -> Result<Vec<PoseRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()).into())
}

pub fn cmd_render(a: &RenderArgs) -> Result<String, CliError> {
    let jobs: Vec<(String, Camera)> = match (&a.manifest, &a.poses) {
        (Some(_), Some(_)) | (None, None) => return usage("give exactly one of --manifest and --poses"),
        (Some(mp), None) => {
            let m = SceneManifest::load(mp)?;
            split_indices(&m, a.split)
                .into_iter()
                .map(|i| Ok((format!("render_{i:05}.png"), m.camera(i)?)))
                .collect::<Result<_, PipelineError>>()?
        }
        (None, Some(pp)) => read_poses(pp)?
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Camera::from_c2w(&p.c2w, p.intrinsics)
                    .map(|c| (format!("pose_{i:05}.png"), c))
                    .map_err(|e| anyhow::anyhow!("pose {i}: {e}").into())
            })
            .collect::<Result<_, CliError>>()?,
    };
    let (grid, bg) = load_scene(&a.scene)?;
    create_out(&a.out)?;
    let cfg = RenderConfig { use_background: bg.is_some(), ..RenderConfig::default() };
    for (name, cam) in &jobs {
        render_image(&grid, bg.as_ref(), cam, &cfg).save_png(&a.out.join(name))?;
    }
    Ok(format!("rendered {} images\n", jobs.len()))
}

struct EvalRow {
    name: String,
    psnr: f64,
    ssim: Option<f64>,
}

/// Counts of rows with PSNR above each threshold.
pub fn threshold_histogram(psnrs: &[f64]) -> [usize; 3] {
    PSNR_THRESHOLDS.map(|t| psnrs.iter().filter(|&&p| p > t).count())
}

fn pngs_in(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn read_metrics_rows(path: &Path) -> Result<Vec<EvalRow>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(anyhow::anyhow!("{}: not a metrics file", path.display()).into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.rsplitn(6, ',').collect();
            let bad = || anyhow::anyhow!("{}: malformed row {l:?}", path.display());
            if f.len() != 6 {
                return Err(bad().into());
            }
            Ok(EvalRow {
                name: f[5].to_string(),
                psnr: f[4].parse().map_err(|_| bad())?,
                ssim: Some(f[3].parse().map_err(|_| bad())?),
            })
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let modes = [a.scene.is_some(), a.rendered.is_some(), !a.metrics.is_empty()];
    if modes.iter().filter(|&&m| m).count() != 1 {
        return usage("give exactly one of --scene/--manifest, --rendered/--reference or --metrics");
    }
    let compare = |name: String, img: &Raster, reference: &Raster| -> Result<EvalRow, CliError> {
        let p = psnr(img, reference)?;
        let s = match ssim(img, reference) {
            Ok(s) => Some(s),
            Err(PipelineError::ImageTooSmall { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(EvalRow { name, psnr: p, ssim: s })
    };
    let mut rows = Vec::new();
    if let (Some(scene), Some(mp)) = (&a.scene, &a.manifest) {
        let m = SceneManifest::load(mp)?;
        let (grid, bg) = load_scene(scene)?;
        let cfg = RenderConfig { use_background: bg.is_some(), ..RenderConfig::default() };
        let idx = m.indices(Split::Test);
        if idx.is_empty() {
            return usage("manifest has no test frames");
        }
        for i in idx {
            let cam = m.camera(i)?;
            let img = render_image(&grid, bg.as_ref(), &cam, &cfg);
            let reference = Raster::load(&m.resolve(&m.frames[i].image))?;
            rows.push(compare(format!("frame_{i:05}"), &img, &reference)?);
        }
    } else if let (Some(rd), Some(fd)) = (&a.rendered, &a.reference) {
        let names = pngs_in(rd)?;
        if names.is_empty() {
            return usage(format!("{} holds no PNG files", rd.display()));
        }
        for name in names {
            let img = Raster::load(&rd.join(&name))?;
            let reference = Raster::load(&fd.join(&name))?;
            rows.push(compare(name, &img, &reference)?);
        }
    } else {
        for p in &a.metrics {
            rows.extend(read_metrics_rows(p)?);
        }
    }
    create_out(&a.out)?;
    let fmt_ssim = |s: Option<f64>| s.map_or("nan".to_string(), |s| format!("{s:.6}"));
    let mut table = String::from("name,psnr,ssim\n");
    for r in &rows {
        writeln!(table, "{},{:.6},{}", csv_field(&r.name), r.psnr, fmt_ssim(r.ssim)).unwrap();
    }
    let psnrs: Vec<f64> = rows.iter().map(|r| r.psnr).collect();
    let hist = threshold_histogram(&psnrs);
    let n = rows.len();
    let mean_psnr = psnrs.iter().sum::<f64>() / n as f64;
    let ssims: Vec<f64> = rows.iter().filter_map(|r| r.ssim).collect();
    let mean_ssim = if ssims.is_empty() { f64::NAN } else { ssims.iter().sum::<f64>() / ssims.len() as f64 };
    let mut summary = String::from("count,mean_psnr,mean_ssim,psnr_gt_15,psnr_gt_20,psnr_gt_25\n");
    writeln!(summary, "{n},{mean_psnr:.6},{mean_ssim:.6},{},{},{}", hist[0], hist[1], hist[2]).unwrap();
    write_text(&a.out.join(EVAL_FILE), &table)?;
    write_text(&a.out.join(EVAL_SUMMARY_FILE), &summary)?;

    let mut text = String::new();
    for r in &rows {
        writeln!(text, "{}\tpsnr {:?}\tssim {}", r.name, r.psnr, r.ssim.map_or("n/a".into(), |s| format!("{s:?}"))).unwrap();
    }
    writeln!(text, "mean psnr {mean_psnr:?}  mean ssim {mean_ssim:?}").unwrap();
    for (t, c) in PSNR_THRESHOLDS.iter().zip(hist) {
        writeln!(text, "PSNR > {t}: {c}/{n} ({:.1}%)", 100.0 * c as f64 / n as f64).unwrap();
    }
    Ok(text)
}

pub fn cmd_pose_sample(a: &PoseSampleArgs) -> Result<String, CliError> {
    let mut cfg = PoseSampleConfig { rng_seed: a.seed, ..PoseSampleConfig::default() };
    if let Some(t) = a.rotation_threshold {
        cfg.rotation_threshold = t;
    }
    if let Some(t) = a.translation_threshold {
        cfg.translation_threshold = t;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let m = SceneManifest::load(&a.manifest)?;
    let cams: Vec<Camera> =
        m.indices(Split::Train).into_iter().map(|i| m.camera(i)).collect::<Result<_, PipelineError>>()?;
    let poses: Vec<_> = cams.iter().map(|c| (c.rotation, c.translation)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::with_capacity(a.n);
    for _ in 0..a.n {
        let p = random_pose(&poses, &cfg, &mut rng)?;
        let intrinsics = random_intrinsics(&cams, &mut rng)?;
        out.push(PoseRecord { c2w: p.c2w(), intrinsics, pair: [p.pair.0, p.pair.1], s: p.s });
    }
    create_out(&a.out)?;
    write_text(&a.out.join(POSES_FILE), &(serde_json::to_string_pretty(&out).expect("poses serialize") + "\n"))?;
    Ok(format!("sampled {} poses\n", out.len()))
}

pub fn cmd_augment_bg(a: &AugmentArgs) -> Result<String, CliError> {
    if !(0.0..=1.0).contains(&a.bg_prob) {
        return usage(format!("--bg-prob must lie in [0, 1], got {}", a.bg_prob));
    }
    let m = SceneManifest::load(&a.manifest)?;
    let (grid, own) = load_scene(&a.scene)?;
    let (_, other) = load_scene(&a.background_scene)?;
    let (Some(own), Some(other)) = (own, other) else {
        return Err(anyhow::anyhow!("both scenes need a background model").into());
    };
    create_out(&a.out)?;
    let cfg = RenderConfig { use_background: true, ..RenderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut table = String::from("frame,file,substituted\n");
    let idx = split_indices(&m, a.split);
    let mut substituted = 0;
    for &i in &idx {
        let view = augment_background(&grid, &own, &other, &m.camera(i)?, &cfg, a.bg_prob, &mut rng)?;
        let name = format!("augment_{i:05}.png");
        view.image.save_png(&a.out.join(&name))?;
        writeln!(table, "{i},{name},{}", view.substituted as u8).unwrap();
        substituted += view.substituted as usize;
    }
    write_text(&a.out.join(AUGMENT_FILE), &table)?;
    Ok(format!("rendered {} views, {substituted} with the substituted background\n", idx.len()))
}

#[derive(Debug, Serialize)]
struct InfoReport {
    resolution: [u32; 3],
    bounds_min: [f32; 3],
    bounds_max: [f32; 3],
    n_voxels: usize,
    background: bool,
    header_bytes: usize,
    coord_bytes: usize,
    density_bytes: usize,
    sh_bytes: usize,
    background_bytes: usize,
    checksum_bytes: usize,
    file_bytes: usize,
    dense_baseline_bytes: usize,
    ratio: f64,
}

pub fn cmd_info(a: &InfoArgs) -> Result<String, CliError> {
    let scene = QuantizedScene::read(&a.scene)?;
    let r = scene.storage_report();
    debug_assert_eq!(r.header, HEADER_BYTES);
    let report = InfoReport {
        resolution: scene.resolution,
        bounds_min: scene.bounds_min,
        bounds_max: scene.bounds_max,
        n_voxels: scene.len(),
        background: scene.background.is_some(),
        header_bytes: r.header,
        coord_bytes: r.coords,
        density_bytes: r.densities,
        sh_bytes: r.sh,
        background_bytes: r.background,
        checksum_bytes: r.checksum,
        file_bytes: r.total,
        dense_baseline_bytes: r.dense_baseline,
        ratio: r.ratio,
    };
    if let Some(out) = &a.out {
        create_out(out)?;
        write_text(&out.join(INFO_FILE), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    let mut text = String::new();
    let [x, y, z] = scene.resolution;
    writeln!(text, "resolution      {x}x{y}x{z}").unwrap();
    writeln!(text, "bounds          {:?} .. {:?}", scene.bounds_min, scene.bounds_max).unwrap();
    writeln!(text, "voxels          {}", report.n_voxels).unwrap();
    writeln!(text, "background      {}", if report.background { "yes" } else { "no" }).unwrap();
    writeln!(text, "header bytes    {}", r.header).unwrap();
    writeln!(text, "coord bytes     {}", r.coords).unwrap();
    writeln!(text, "density bytes   {}", r.densities).unwrap();
    writeln!(text, "sh bytes        {}", r.sh).unwrap();
    writeln!(text, "background bytes {}", r.background).unwrap();
    writeln!(text, "checksum bytes  {}", r.checksum).unwrap();
    writeln!(text, "file bytes      {}", r.total).unwrap();
    writeln!(text, "dense baseline  {} ({:.2}%)", r.dense_baseline, 100.0 * r.ratio).unwrap();
    Ok(text)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<String, CliError> {
    if a.size < 11 {
        return usage("--size must be at least 11");
    }
    let cube = ColoredCube::default();
    let train_cams = training_rig(a.size);
    let test_cams = heldout_rig(a.test_views, a.size);
    let images = a.out.join("images");
    create_out(&images)?;
    let mut frames = Vec::new();
    for (i, (cam, split)) in train_cams
        .iter()
        .map(|c| (c, Split::Train))
        .chain(test_cams.iter().map(|c| (c, Split::Test)))
        .enumerate()
    {
        let rel = PathBuf::from("images").join(format!("frame_{i:03}.png"));
        cube.render(cam).save_png(&a.out.join(&rel))?;
        frames.push(serde_json::json!({
            "image": rel,
            "intrinsics": cam.intrinsics(),
            "c2w": cam.c2w(),
            "split": split,
        }));
    }
    let (lo, hi) = cube.grid_bounds();
    let manifest = serde_json::json!({
        "scene_id": "synthetic_cube",
        "bounds": { "min": [lo.x, lo.y, lo.z], "max": [hi.x, hi.y, hi.z] },
        "frames": frames,
    });
    let path = a.out.join(SYNTH_MANIFEST_FILE);
    write_text(&path, &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))?;
    SceneManifest::load(&path)?.check_frozen()?;
    Ok(format!("wrote {} frames to {}\n", frames.len(), path.display()))
}
