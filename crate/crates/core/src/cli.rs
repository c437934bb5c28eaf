//! `mvp` command-line driver.
//!
//! Exit codes: 0 success, 1 assertion threshold violated, 2 input or usage
//! error. Every command writes one `<command>.manifest.json` next to its
//! outputs, recording the effective configuration and SHA-256 digests of
//! all inputs and outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    self, chamfer, density_report, masked_experiment, MaskedExperimentConfig,
    DEFAULT_MASK_FRACTION, DEFAULT_MIN_POINTS,
};
use crate::scene::{
    self, decode_cloud, decode_virtual, CLOUD_MAGIC, DEFAULT_SCORE_THRESHOLD, VIRTUAL_MAGIC,
};
use crate::simulator::{
    self, CALIBRATION_FILE, CLOUD_FILE, GROUND_TRUTH_FILE, MASK_MAP_FILE, MASK_META_FILE,
};
use crate::virtual_points::{generate, GenerationConfig};
use crate::voxelizer::{
    self, encode_padded, encode_split, EncodingMode, VoxelGridSpec, DEFAULT_RANGE,
    DEFAULT_VOXEL_SIZE,
};

pub const SEED_ENV: &str = "MVP_SEED";

pub const VIRTUAL_FILE: &str = "virtual.mvvp";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const VOXEL_FILE: &str = "voxels.mvvx";

#[derive(Debug, Parser)]
#[command(name = "mvp", version, about = "Multimodal virtual point toolkit")]
struct Cli {
    /// Worker threads for parallel stages; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-cast a synthetic scene into a frame bundle.
    Simulate(SimulateArgs),
    /// Lift instance-mask pixels into virtual points.
    Generate(GenerateArgs),
    /// Encode real and virtual points into a voxel grid.
    Voxelize(VoxelizeArgs),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    scene: PathBuf,
    out_dir: PathBuf,
    /// Overrides the scene's seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Input frame files. `--frame DIR` fills every unset path from a simulator
/// bundle.
#[derive(Debug, Args, Clone)]
struct FrameArgs {
    #[arg(long)]
    frame: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// 16-bit PGM instance map.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Instance metadata JSON.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
}

impl FrameArgs {
    fn path(&self, explicit: &Option<PathBuf>, default_name: &str, what: &str) -> Result<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.frame.as_ref().map(|d| d.join(default_name)))
            .ok_or_else(|| Error::InvalidInput(format!("missing --{what} (or --frame)")))
    }

    fn cloud(&self) -> Result<PathBuf> {
        self.path(&self.cloud, CLOUD_FILE, "cloud")
    }

    fn masks(&self) -> Result<PathBuf> {
        self.path(&self.masks, MASK_MAP_FILE, "masks")
    }

    fn meta(&self) -> Result<PathBuf> {
        self.path(&self.meta, MASK_META_FILE, "meta")
    }

    fn calib(&self) -> Result<PathBuf> {
        self.path(&self.calib, CALIBRATION_FILE, "calib")
    }
}

#[derive(Debug, Args, Clone)]
struct GenerationArgs {
    /// Virtual points per instance [default: 50].
    #[arg(long)]
    tau: Option<usize>,
    /// Falls back to the config file, then MVP_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of detector classes [default: 10].
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    frame_id: Option<u64>,
    /// Detections scoring below this are ignored [default: 0.05].
    #[arg(long)]
    score_threshold: Option<f64>,
    /// Cell size of the nearest-neighbor pixel grid [default: 8].
    #[arg(long)]
    nn_cell_size: Option<u32>,
    /// JSON file with any of the flag names (snake_case) as keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    frame: FrameArgs,
    #[command(flatten)]
    generation: GenerationArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write virtual.csv.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Split,
    Padded,
}

#[derive(Debug, Args)]
struct VoxelizeArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long = "virtual")]
    virtual_points: PathBuf,
    #[arg(long, value_enum, default_value = "split")]
    mode: ModeArg,
    /// x_min x_max y_min y_max z_min z_max
    #[arg(long, num_args = 6, allow_hyphen_values = true)]
    range: Option<Vec<f64>>,
    /// dx dy dz
    #[arg(long, num_args = 3)]
    voxel_size: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    /// Also write voxels.csv.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Chamfer distance between two point files (MVPC1 or MVVP1).
    Chamfer(ChamferArgs),
    /// Masked-Lidar depth-completion experiment.
    Masked(MaskedArgs),
    /// Real and virtual point counts per object and range bin.
    Density(DensityArgs),
}

#[derive(Debug, Args)]
struct ChamferArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Exit 1 when the bidirectional distance exceeds this.
    #[arg(long)]
    assert_max_chamfer: Option<f64>,
}

#[derive(Debug, Args)]
struct MaskedArgs {
    #[command(flatten)]
    frame: FrameArgs,
    /// Ground-truth sidecar written by `simulate`.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[command(flatten)]
    generation: GenerationArgs,
    /// [default: 15]
    #[arg(long)]
    min_points: Option<usize>,
    /// [default: 0.8]
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: bool,
    /// Exit 1 when the aggregate bidirectional chamfer exceeds this.
    #[arg(long)]
    assert_max_chamfer: Option<f64>,
}

#[derive(Debug, Args)]
struct DensityArgs {
    #[arg(long)]
    frame: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long = "virtual")]
    virtual_points: PathBuf,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: bool,
}

/// Values a `--config` file may set.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    tau: Option<usize>,
    seed: Option<u64>,
    num_classes: Option<usize>,
    frame_id: Option<u64>,
    score_threshold: Option<f64>,
    nn_cell_size: Option<u32>,
    min_points: Option<usize>,
    mask_fraction: Option<f64>,
}

#[derive(Debug, Serialize)]
struct FileRecord {
    role: String,
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Runtime {
    wall_time_s: f64,
    threads: usize,
}

/// Written next to every command's outputs. Everything except `runtime` is
/// a pure function of the inputs and configuration.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    tool_version: &'static str,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    runtime: Runtime,
}

/// Failure categories mapped onto exit codes.
enum Failure {
    Input(Error),
    Assertion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (program name first) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    let started = Instant::now();
    let result = pool.install(|| {
        let ctx = Context {
            started,
            threads: pool.current_num_threads(),
        };
        match cli.command {
            Command::Simulate(a) => cmd_simulate(&ctx, a),
            Command::Generate(a) => cmd_generate(&ctx, a),
            Command::Voxelize(a) => cmd_voxelize(&ctx, a),
            Command::Eval(EvalCommand::Chamfer(a)) => cmd_eval_chamfer(&ctx, a),
            Command::Eval(EvalCommand::Masked(a)) => cmd_eval_masked(&ctx, a),
            Command::Eval(EvalCommand::Density(a)) => cmd_eval_density(&ctx, a),
        }
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(Failure::Assertion(msg)) => {
            eprintln!("assertion failed: {msg}");
            1
        }
    }
}

struct Context {
    started: Instant,
    threads: usize,
}

impl Context {
    fn write_manifest(
        &self,
        out_dir: &Path,
        command: &str,
        seed: Option<u64>,
        config: Value,
        inputs: &[(&str, &Path)],
        outputs: &[&str],
    ) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|(role, path)| {
                Ok(FileRecord {
                    role: role.to_string(),
                    path: path.display().to_string(),
                    sha256: sha256_file(path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = outputs
            .iter()
            .map(|name| {
                Ok(FileRecord {
                    role: "output".into(),
                    path: name.to_string(),
                    sha256: sha256_file(&out_dir.join(name))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs,
            outputs,
            runtime: Runtime {
                wall_time_s: self.started.elapsed().as_secs_f64(),
                threads: self.threads,
            },
        };
        let path = out_dir.join(format!("{command}.manifest.json"));
        write_json(&path, &manifest)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidInput(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_config_file(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p, e))
        }
    }
}

/// Effective generation settings: flags, then config file, then defaults.
fn resolve_generation(args: &GenerationArgs, file: &ConfigFile) -> Result<(GenerationConfig, f64)> {
    let d = GenerationConfig::default();
    let seed = match args.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(d.seed),
    };
    let config = GenerationConfig {
        tau: args.tau.or(file.tau).unwrap_or(d.tau),
        seed,
        frame_id: args.frame_id.or(file.frame_id).unwrap_or(d.frame_id),
        nn_cell_size: args.nn_cell_size.or(file.nn_cell_size).unwrap_or(d.nn_cell_size),
        num_classes: args.num_classes.or(file.num_classes).unwrap_or(d.num_classes),
    };
    config.validate()?;
    let threshold = args
        .score_threshold
        .or(file.score_threshold)
        .unwrap_or(DEFAULT_SCORE_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("score threshold {threshold} outside [0, 1]")));
    }
    Ok((config, threshold))
}

fn cmd_simulate(ctx: &Context, args: SimulateArgs) -> CmdResult {
    let mut spec = simulator::load_scene(&args.scene)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let frame = simulator::simulate(&spec)?;
    let written = simulator::write_frame(&frame, &args.out_dir)?;
    ctx.write_manifest(
        &args.out_dir,
        "simulate",
        Some(spec.seed),
        json!({ "scene": spec }),
        &[("scene", &args.scene)],
        &written,
    )?;
    Ok(())
}

fn cmd_generate(ctx: &Context, args: GenerateArgs) -> CmdResult {
    let file = load_config_file(&args.generation.config)?;
    let (config, threshold) = resolve_generation(&args.generation, &file)?;
    let (cloud_path, masks_path, meta_path, calib_path) = (
        args.frame.cloud()?,
        args.frame.masks()?,
        args.frame.meta()?,
        args.frame.calib()?,
    );
    let calib = scene::load_calibration(&calib_path)?;
    let mut cloud = scene::load_cloud(&cloud_path)?;
    cloud.timestamp = calib.t_lidar;
    let masks = scene::load_masks(&masks_path, &meta_path, threshold)?;
    let generation = generate(&cloud, &masks, &calib, &config)?;

    create_dir(&args.out)?;
    let mut outputs = vec![VIRTUAL_FILE, DIAGNOSTICS_FILE];
    scene::save_virtual(&generation.points, args.out.join(VIRTUAL_FILE))?;
    write_json(
        &args.out.join(DIAGNOSTICS_FILE),
        &json!({
            "feature_dim": generation.points.feature_dim,
            "virtual_points": generation.points.len(),
            "skipped_instances": generation.skipped_instances(),
            "instances": generation.diagnostics,
        }),
    )?;
    if args.csv {
        let p = args.out.join("virtual.csv");
        write_csv(&p, |w| scene::write_virtual_csv(&generation.points, w))?;
        outputs.push("virtual.csv");
    }
    ctx.write_manifest(
        &args.out,
        "generate",
        Some(config.seed),
        json!({ "generation": config, "score_threshold": threshold }),
        &[
            ("cloud", &cloud_path),
            ("masks", &masks_path),
            ("meta", &meta_path),
            ("calib", &calib_path),
        ],
        &outputs,
    )?;
    Ok(())
}

fn cmd_voxelize(ctx: &Context, args: VoxelizeArgs) -> CmdResult {
    let range: [f64; 6] = match &args.range {
        Some(v) => v.as_slice().try_into().expect("clap enforces six values"),
        None => DEFAULT_RANGE,
    };
    let size: [f64; 3] = match &args.voxel_size {
        Some(v) => v.as_slice().try_into().expect("clap enforces three values"),
        None => DEFAULT_VOXEL_SIZE,
    };
    let grid = VoxelGridSpec::new(range, size)?;
    let cloud = scene::load_cloud(&args.cloud)?;
    let virt = scene::load_virtual(&args.virtual_points)?;
    let (mode, encoding) = match args.mode {
        ModeArg::Split => (EncodingMode::Split, encode_split(&cloud, &virt, &grid)?),
        ModeArg::Padded => (EncodingMode::Padded, encode_padded(&cloud, &virt, &grid)?),
    };

    create_dir(&args.out)?;
    let mut outputs = vec![VOXEL_FILE];
    voxelizer::save_voxels(&encoding, args.out.join(VOXEL_FILE))?;
    if args.csv {
        let p = args.out.join("voxels.csv");
        write_csv(&p, |w| voxelizer::write_voxels_csv(&encoding, w))?;
        outputs.push("voxels.csv");
    }
    ctx.write_manifest(
        &args.out,
        "voxelize",
        None,
        json!({
            "mode": mode,
            "grid": grid,
            "voxels": encoding.voxels.len(),
            "real_dropped": encoding.real_dropped,
            "virtual_dropped": encoding.virtual_dropped,
        }),
        &[("cloud", &args.cloud), ("virtual", &args.virtual_points)],
        &outputs,
    )?;
    Ok(())
}

/// Positions from either an MVPC1 cloud or an MVVP1 virtual point file.
fn load_positions(path: &Path) -> Result<Vec<nalgebra::Point3<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CLOUD_MAGIC) {
        Ok(decode_cloud(&bytes)?.positions())
    } else if bytes.starts_with(VIRTUAL_MAGIC) {
        Ok(decode_virtual(&bytes)?.positions())
    } else {
        Err(Error::Format(format!(
            "{}: neither an MVPC1 nor an MVVP1 file",
            path.display()
        )))
    }
}

fn check_max(value: f64, max: Option<f64>) -> CmdResult {
    match max {
        Some(m) if !(value <= m) => Err(Failure::Assertion(format!(
            "bidirectional chamfer {value} exceeds {m}"
        ))),
        _ => Ok(()),
    }
}

fn cmd_eval_chamfer(ctx: &Context, args: ChamferArgs) -> CmdResult {
    let a = load_positions(&args.a)?;
    let b = load_positions(&args.b)?;
    let result = chamfer(&a, &b)?;
    create_dir(&args.out)?;
    write_json(
        &args.out.join("chamfer.json"),
        &json!({ "chamfer_definition": eval::CHAMFER_DEFINITION, "result": result }),
    )?;
    ctx.write_manifest(
        &args.out,
        "eval-chamfer",
        None,
        json!({ "assert_max_chamfer": args.assert_max_chamfer }),
        &[("a", &args.a), ("b", &args.b)],
        &["chamfer.json"],
    )?;
    check_max(result.bidirectional, args.assert_max_chamfer)
}

fn ground_truth_path(explicit: &Option<PathBuf>, frame: &Option<PathBuf>) -> Result<PathBuf> {
    let path = explicit
        .clone()
        .or_else(|| frame.as_ref().map(|d| d.join(GROUND_TRUTH_FILE)))
        .ok_or_else(|| Error::InvalidInput("missing --ground-truth (or --frame)".into()))?;
    if !path.is_file() {
        return Err(Error::Load(format!(
            "ground-truth sidecar {} not found",
            path.display()
        )));
    }
    Ok(path)
}

fn cmd_eval_masked(ctx: &Context, args: MaskedArgs) -> CmdResult {
    let gt_path = ground_truth_path(&args.ground_truth, &args.frame.frame)?;
    let file = load_config_file(&args.generation.config)?;
    let (generation, threshold) = resolve_generation(&args.generation, &file)?;
    let config = MaskedExperimentConfig {
        min_points: args.min_points.or(file.min_points).unwrap_or(DEFAULT_MIN_POINTS),
        mask_fraction: args
            .mask_fraction
            .or(file.mask_fraction)
            .unwrap_or(DEFAULT_MASK_FRACTION),
        seed: generation.seed,
    };
    config.validate()?;
    let (cloud_path, masks_path, meta_path, calib_path) = (
        args.frame.cloud()?,
        args.frame.masks()?,
        args.frame.meta()?,
        args.frame.calib()?,
    );
    let calib = scene::load_calibration(&calib_path)?;
    let mut cloud = scene::load_cloud(&cloud_path)?;
    cloud.timestamp = calib.t_lidar;
    let masks = scene::load_masks(&masks_path, &meta_path, threshold)?;
    let gt = simulator::load_ground_truth(&gt_path)?;
    let report = masked_experiment(&cloud, &gt.point_object_ids, &masks, &calib, &generation, &config)?;

    create_dir(&args.out)?;
    let mut outputs = vec!["masked.json"];
    write_json(&args.out.join("masked.json"), &report)?;
    if args.csv {
        write_csv(&args.out.join("masked.csv"), |w| eval::write_masked_csv(&report, w))?;
        outputs.push("masked.csv");
    }
    ctx.write_manifest(
        &args.out,
        "eval-masked",
        Some(config.seed),
        json!({
            "experiment": config,
            "generation": generation,
            "score_threshold": threshold,
            "assert_max_chamfer": args.assert_max_chamfer,
        }),
        &[
            ("cloud", &cloud_path),
            ("masks", &masks_path),
            ("meta", &meta_path),
            ("calib", &calib_path),
            ("ground_truth", &gt_path),
        ],
        &outputs,
    )?;
    match (report.aggregate, args.assert_max_chamfer) {
        (Some(agg), max) => check_max(agg.bidirectional, max),
        (None, Some(_)) => Err(Failure::Assertion("no object qualified for evaluation".into())),
        (None, None) => Ok(()),
    }
}

fn cmd_eval_density(ctx: &Context, args: DensityArgs) -> CmdResult {
    let gt_path = ground_truth_path(&args.ground_truth, &args.frame)?;
    let cloud_path = args
        .cloud
        .clone()
        .or_else(|| args.frame.as_ref().map(|d| d.join(CLOUD_FILE)))
        .ok_or_else(|| Error::InvalidInput("missing --cloud (or --frame)".into()))?;
    let cloud = scene::load_cloud(&cloud_path)?;
    let virt = scene::load_virtual(&args.virtual_points)?;
    let gt = simulator::load_ground_truth(&gt_path)?;
    let report = density_report(&cloud, &virt, &gt)?;

    create_dir(&args.out)?;
    let mut outputs = vec!["density.json"];
    write_json(&args.out.join("density.json"), &report)?;
    if args.csv {
        write_csv(&args.out.join("density.csv"), |w| eval::write_density_csv(&report, w))?;
        outputs.push("density.csv");
    }
    ctx.write_manifest(
        &args.out,
        "eval-density",
        None,
        json!({ "range_bins": eval::RANGE_BIN_LABELS }),
        &[
            ("cloud", &cloud_path),
            ("virtual", &args.virtual_points),
            ("ground_truth", &gt_path),
        ],
        &outputs,
    )?;
    Ok(())
}
