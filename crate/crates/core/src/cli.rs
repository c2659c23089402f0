//! Command-line surface. [`run`] parses arguments, executes one command and
//! returns the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other runtime failure |
//! | 2 | I/O failure or unreadable input file |
//! | 3 | usage error |
//! | 4 | training loss diverged |
//! | 5 | resume checkpoint does not match the config |

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, BackboneError};
use crate::checkpoint::CheckpointError;
use crate::domain::BaseStation;
use crate::heatmap;
use crate::ingest::{
    load_synthetic_dataset, read_scene_dir, save_synthetic_dataset, write_gray_png, IngestError, Sample, Split,
    SyntheticEntry, MANIFEST_FILE,
};
use crate::metrics::{evaluate_predictions, evaluate_split, EvalDomain, MetricsError, Passthrough};
use crate::pipeline::{PipelineError, RadioMapModel};
use crate::sim::{compute_pathloss, generate_scene, sample_free_cell, OracleConfig, SimError};
use crate::training::{load_vae, run_training, train_vae, DiffusionObjective, RunControl, TrainConfig, TrainError};
use crate::vae::{VaeConfig, VaeError};

/// Environment variable naming the default dataset root.
pub const DATA_ENV: &str = "RADIOMAP_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_RESUME_MISMATCH: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "radiomap", version, about = "Radio map construction with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the autoencoder or the denoiser.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Predict one radio map and render it.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Generate scenes, run the propagation oracle and write a dataset.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid side length in cells.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Number of distinct building layouts.
    #[arg(long, default_value_t = 8)]
    maps: usize,
    /// Transmitter positions per layout.
    #[arg(long, default_value_t = 1)]
    tx: usize,
    #[arg(long, default_value_t = 6)]
    buildings: usize,
    #[arg(long, default_value_t = 4)]
    vehicles: usize,
    /// Layouts assigned to the training split; defaults to four in five.
    #[arg(long)]
    train_maps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    Vae(TrainArgs),
    Diffusion(DiffusionArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML file with optional `[train]` and `[model]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint and exit after this step.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Debug, Args)]
struct DiffusionArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Trained autoencoder (`train vae` output).
    #[arg(long)]
    vae_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory holding `static.png` and `dynamic.png`.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    bs_row: usize,
    #[arg(long)]
    bs_col: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `gray.png` and `heatmap.png`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum DomainArg {
    Gray,
    Db,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Diffusion checkpoint; not needed with `--passthrough`.
    #[arg(long, required_unless_present = "passthrough")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output directory for `summary.txt` and `metrics.csv`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DomainArg::Gray)]
    domain: DomainArg,
    /// Score the ground truth against itself.
    #[arg(long)]
    passthrough: bool,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

/// An error with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

fn with_code(code: i32, e: impl std::fmt::Display) -> CliError {
    CliError {
        code,
        message: e.to_string(),
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let code = match e {
            IngestError::InvalidConfig(_) => EXIT_USAGE,
            IngestError::NonFiniteInput { .. } | IngestError::OutOfRange { .. } => EXIT_FAILURE,
            _ => EXIT_IO,
        };
        with_code(code, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::WrongKind { .. } => EXIT_USAGE,
            CheckpointError::Tensor(_) => EXIT_FAILURE,
            _ => EXIT_IO,
        };
        with_code(code, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergedLoss { .. } => with_code(EXIT_DIVERGED, e),
            TrainError::ResumeMismatch { .. } => with_code(EXIT_RESUME_MISMATCH, e),
            TrainError::InvalidConfig(_)
            | TrainError::EmptyDataset
            | TrainError::Vae(VaeError::InvalidConfig(_))
            | TrainError::Backbone(BackboneError::InvalidConfig(_)) => with_code(EXIT_USAGE, e),
            TrainError::Io { .. } => with_code(EXIT_IO, e),
            TrainError::Checkpoint(c) => c.into(),
            other => with_code(EXIT_FAILURE, other),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Checkpoint(c) => c.into(),
            PipelineError::Train(t) => t.into(),
            PipelineError::SceneSize { .. } => with_code(EXIT_USAGE, e),
            other => with_code(EXIT_FAILURE, other),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::Io { .. } => EXIT_IO,
            _ => EXIT_FAILURE,
        };
        with_code(code, e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Encode(i) => i.into(),
            SimError::GridTooSmall(_) | SimError::InvalidConfig(_) => with_code(EXIT_USAGE, e),
            other => with_code(EXIT_FAILURE, other),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Diagnostics go to stderr, results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Dataset(DatasetCommand::Gen(a)) => dataset_gen(&a, out),
        Command::Train(TrainCommand::Vae(a)) => train_vae_cmd(&a, out),
        Command::Train(TrainCommand::Diffusion(a)) => train_diffusion_cmd(&a, out),
        Command::Infer(a) => infer_cmd(&a, out),
        Command::Evaluate(a) => evaluate_cmd(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn emit(out: &mut dyn std::io::Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io(format!("stdout: {e}")))
}

fn dataset_gen(a: &GenArgs, out: &mut dyn std::io::Write) -> Result<()> {
    if a.maps == 0 || a.tx == 0 {
        return Err(CliError::usage("--maps and --tx must be at least 1"));
    }
    let train_maps = a.train_maps.unwrap_or(a.maps - a.maps / 5);
    if train_maps > a.maps {
        return Err(CliError::usage("--train-maps exceeds --maps"));
    }
    let oracle = OracleConfig::default();
    let mut seeds = ChaCha8Rng::seed_from_u64(a.seed);
    let mut entries = Vec::with_capacity(a.maps * a.tx);
    for map_id in 0..a.maps as u32 {
        let map_seed: u64 = seeds.random();
        let base = generate_scene(map_seed, a.n, a.buildings, a.vehicles)?;
        let mut rng = ChaCha8Rng::seed_from_u64(map_seed);
        for tx_index in 0..a.tx {
            let scene = if tx_index == 0 {
                base.clone()
            } else {
                let (r, c) = sample_free_cell(&mut rng, base.static_mask(), base.dynamic_mask())?;
                base.with_bs(BaseStation::at(r, c)).map_err(SimError::from)?
            };
            let rm = compute_pathloss(&scene, &oracle)?;
            entries.push(SyntheticEntry {
                map_id,
                tx_index,
                scene,
                gray: rm.gray,
            });
        }
    }
    save_synthetic_dataset(&a.out, &entries, &oracle.encode_config(), train_maps)?;
    emit(out, format_args!("{}", a.out.join(MANIFEST_FILE).display()))
}

/// Default JSON document overlaid with a TOML table, then deserialized.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, table: Option<&toml::Value>, what: &str) -> Result<T> {
    let mut doc = serde_json::to_value(base).expect("configs serialize");
    if let Some(t) = table {
        let patch = serde_json::to_value(t).map_err(|e| CliError::usage(format!("[{what}]: {e}")))?;
        let (Some(obj), Some(patch)) = (doc.as_object_mut(), patch.as_object()) else {
            return Err(CliError::usage(format!("[{what}] must be a table")));
        };
        for (k, v) in patch {
            obj.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(doc).map_err(|e| CliError::usage(format!("[{what}]: {e}")))
}

struct RunConfig {
    train: TrainConfig,
    model: Option<toml::Value>,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig {
            train: TrainConfig::default(),
            model: None,
        });
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let train = doc.remove("train");
    let model = doc.remove("model");
    if let Some(k) = doc.keys().next() {
        return Err(CliError::usage(format!("{}: unknown table [{k}]", path.display())));
    }
    Ok(RunConfig {
        train: overlay(&TrainConfig::default(), train.as_ref(), "train")?,
        model,
    })
}

fn load_split(data: &Path, split: Split) -> Result<Vec<Sample>> {
    let index = load_synthetic_dataset(data)?.select(split);
    if index.is_empty() {
        return Err(CliError::usage(format!("split {split:?} of {} is empty", data.display())));
    }
    Ok(index.load_all()?)
}

fn control(a: &TrainArgs) -> RunControl {
    RunControl {
        out_dir: a.out.clone(),
        resume: a.resume.clone(),
        stop_after: a.stop_after,
    }
}

fn report_training(out: &mut dyn std::io::Write, report: &crate::training::TrainReport) -> Result<()> {
    if let Some(loss) = report.final_loss() {
        emit(out, format_args!("step={} loss={loss}", report.last_step))?;
    }
    emit(out, format_args!("{}", report.checkpoint.display()))
}

fn train_vae_cmd(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let vae_cfg: VaeConfig = overlay(&VaeConfig::desk(), cfg.model.as_ref(), "model")?;
    let samples = load_split(&a.data, a.split)?;
    let grays = samples.into_iter().map(|s| s.gray).collect();
    let (_, report) = train_vae(grays, vae_cfg, &cfg.train, &control(a))?;
    report_training(out, &report)
}

fn train_diffusion_cmd(a: &DiffusionArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let Some(vae_path) = &a.vae_checkpoint else {
        return Err(CliError::usage(
            "train diffusion needs --vae-checkpoint; run `train vae` first",
        ));
    };
    let c = &a.common;
    let cfg = read_config(c.config.as_deref())?;
    let samples = load_split(&c.data, c.split)?;
    let n = samples[0].scene.size();
    let defaults = BackboneConfig {
        drift_kind: cfg.train.drift_kind,
        ..BackboneConfig::desk(n)
    };
    let net: BackboneConfig = overlay(&defaults, cfg.model.as_ref(), "model")?;
    if net.drift_kind != cfg.train.drift_kind {
        return Err(CliError::usage("[model] drift_kind must match [train] drift_kind"));
    }
    let vae = load_vae(vae_path)?;
    let obj = DiffusionObjective::new(net, vae, &samples, cfg.train.seed)?;
    let report = run_training(&obj, &cfg.train, &control(c))?;
    report_training(out, &report)
}

fn infer_cmd(a: &InferArgs, out: &mut dyn std::io::Write) -> Result<()> {
    if a.steps == 0 {
        return Err(CliError::usage("--steps must be at least 1"));
    }
    let model = RadioMapModel::load(&a.checkpoint)?;
    let scene = read_scene_dir(&a.scene, BaseStation::at(a.bs_row, a.bs_col))?;
    let started = Instant::now();
    let gray = model.infer(&scene, a.steps, a.seed)?;
    let elapsed = started.elapsed();
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(format!("{}: {e}", a.out.display())))?;
    write_gray_png(&a.out.join("gray.png"), &heatmap::to_u8(&gray))?;
    let hm = a.out.join("heatmap.png");
    heatmap::save(&gray, &hm).map_err(|e| CliError::io(format!("{}: {e}", hm.display())))?;
    emit(out, format_args!("sampling_time_s={:.3}", elapsed.as_secs_f64()))?;
    emit(out, format_args!("{}", a.out.display()))
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let index = load_synthetic_dataset(&a.data)?;
    let encode = index.encode;
    let samples = load_split(&a.data, a.split)?;
    let domain = match a.domain {
        DomainArg::Gray => EvalDomain::Gray,
        DomainArg::Db => EvalDomain::Db(encode),
    };
    let report = if a.passthrough {
        evaluate_split(&Passthrough, &samples, domain)?
    } else {
        if a.steps == 0 || a.batch == 0 {
            return Err(CliError::usage("--steps and --batch must be at least 1"));
        }
        let path = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
        let model = RadioMapModel::load(path)?;
        let mut preds = Vec::with_capacity(samples.len());
        for (k, chunk) in samples.chunks(a.batch).enumerate() {
            let scenes: Vec<_> = chunk.iter().map(|s| &s.scene).collect();
            // One seed per record, independent of the batch size.
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|i| a.seed.wrapping_add((k * a.batch + i) as u64))
                .collect();
            preds.extend(model.infer_batch(&scenes, a.steps, &seeds)?);
        }
        evaluate_predictions(&samples, &preds, domain)?
    };
    report.write(&a.report.join("summary.txt"), &a.report.join("metrics.csv"))?;
    write!(out, "{}", report.summary()).map_err(|e| CliError::io(format!("stdout: {e}")))
}
