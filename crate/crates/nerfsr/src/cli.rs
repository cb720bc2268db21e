//! Command-line entry points: `train`, `render`, `eval`, `ablate`,
//! `benchmark`, and `make-toy`, all operating on a single run directory with
//! one manifest per run. Config precedence is built-in defaults < config
//! file < command-line overrides, and the fully resolved config is persisted
//! with every run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, persist_toy_scene, SceneDataset, ToySceneSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_views, profile_render, render_table, save_renders, EvalOptions, RenderPipeline,
    Upscaler,
};
use crate::field::{FieldConfig, RadianceField};
use crate::geometry::downscale_camera;
use crate::io::{archive::Archive, png};
use crate::renderer::RenderConfig;
use crate::sampling::MAX_ROTATION_DEG;
use crate::sr::MIN_INPUT_SIDE;
use crate::training::{
    default_patch_size, distill, init_end_to_end_state, train_end_to_end, warmup_backbone,
    Strategy, TrainState, WarmupConfig,
};

/// Environment variable giving the default dataset root when neither the
/// config file nor `--data` names one.
pub const DATA_ROOT_ENV: &str = "NERFSR_DATA_ROOT";

const CONFIG_FILE: &str = "config.toml";
const MANIFEST_FILE: &str = "manifest.json";
const RUN_SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Run configuration.
// ---------------------------------------------------------------------------

/// Strategy-by-seed matrix for the `ablate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Run cells in parallel. Disables the wall-clock columns of the
    /// summary: concurrent cells compete for cores, so per-cell times stop
    /// meaning anything.
    pub parallel: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            strategies: vec![Strategy::FtGridPatch, Strategy::FtRandPatch],
            seeds: vec![0, 1, 2],
            parallel: false,
        }
    }
}

/// The full schema-versioned run configuration (TOML on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Dataset directory. Falls back to the `NERFSR_DATA_ROOT` environment
    /// variable when absent.
    pub data_root: Option<PathBuf>,
    /// Pre-downsample factor applied to the dataset as loaded (the stored
    /// capture resolution, distinct from the super-resolution ratio).
    pub downsample: usize,
    /// Scene background color; forced into both render configs so training
    /// composites against the same color the ground truth was composited on.
    pub background: [f64; 3],
    /// High-resolution teacher weights for the Distillation strategy (a
    /// field archive or a training checkpoint).
    pub teacher_checkpoint: Option<PathBuf>,
    pub field: FieldConfig,
    pub warmup: WarmupConfig,
    pub train: crate::training::TrainConfig,
    pub ablate: Option<AblateConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_SCHEMA_VERSION,
            data_root: None,
            downsample: 1,
            background: [1.0, 1.0, 1.0],
            teacher_checkpoint: None,
            field: FieldConfig::default(),
            warmup: WarmupConfig::default(),
            train: crate::training::TrainConfig::default(),
            ablate: None,
        }
    }
}

/// Command-line overrides shared by `train` and `ablate`. Precedence:
/// defaults < environment < config file < these flags.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Run configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Master seed; every random consumer derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Super-resolution ratio.
    #[arg(long, value_parser = [clap::builder::PossibleValue::new("2"), clap::builder::PossibleValue::new("4"), clap::builder::PossibleValue::new("8")])]
    pub ratio: Option<String>,
    /// Training strategy (bilinear, pretrained, scratch, ft-grid-patch,
    /// ft-rand-patch, distillation).
    #[arg(long)]
    pub strategy: Option<String>,
    /// End-to-end epochs (0 = warm-up only).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Compute device descriptor.
    #[arg(long)]
    pub device: Option<String>,
}

/// Keys a config file may set, per table; anything else is a schema
/// violation (a typo would otherwise be silently ignored).
const TOP_KEYS: &[&str] = &[
    "schema_version",
    "data_root",
    "downsample",
    "background",
    "teacher_checkpoint",
    "field",
    "warmup",
    "train",
    "ablate",
];
const FIELD_KEYS: &[&str] = &[
    "bounding_box",
    "resolution",
    "density_rank",
    "density_channels",
    "appearance_rank",
    "appearance_channels",
    "hidden_dim",
    "dir_freqs",
    "density_shift",
    "density_decoder",
    "factor_std",
];
const WARMUP_KEYS: &[&str] = &[
    "iters",
    "batch_size",
    "lr_grid",
    "lr_network",
    "lr_final_factor",
    "upsample_schedule",
    "optimizer",
    "seed",
    "render",
];
const TRAIN_KEYS: &[&str] = &[
    "strategy",
    "ratio",
    "epochs",
    "learning_rate",
    "patch_size",
    "optimizer",
    "seed",
    "device",
    "augment",
    "checkpoint_every",
    "render",
    "sr_blocks",
    "sr_channels",
    "distill_images",
    "pretrained_sr",
];
const ABLATE_KEYS: &[&str] = &["strategies", "seeds", "parallel"];

fn unknown_keys(table: &toml::Value, known: &[&str], prefix: &str, out: &mut Vec<String>) {
    if let Some(map) = table.as_table() {
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                out.push(format!("{prefix}{key}: unknown configuration key"));
            }
        }
    }
}

/// Builds the resolved configuration: defaults, then the `NERFSR_DATA_ROOT`
/// environment (as `env_data_root`), then the config file, then command-line
/// overrides. Derived defaults (patch size per ratio, Distillation's 100
/// epochs) apply only where neither file nor flags chose a value.
pub fn resolve_config(overrides: &Overrides, env_data_root: Option<PathBuf>) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    config.data_root = env_data_root;

    let mut file_sets_epochs = false;
    let mut file_sets_patch = false;
    let mut file_sets_warmup_seed = false;
    if let Some(path) = &overrides.config {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let value: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut violations = Vec::new();
        unknown_keys(&value, TOP_KEYS, "", &mut violations);
        for (table, keys) in
            [("field", FIELD_KEYS), ("warmup", WARMUP_KEYS), ("train", TRAIN_KEYS), ("ablate", ABLATE_KEYS)]
        {
            if let Some(sub) = value.get(table) {
                unknown_keys(sub, keys, &format!("{table}."), &mut violations);
            }
        }
        if !violations.is_empty() {
            return Err(config_violations(&violations));
        }
        let train = value.get("train");
        file_sets_epochs = train.and_then(|t| t.get("epochs")).is_some();
        file_sets_patch = train.and_then(|t| t.get("patch_size")).is_some();
        file_sets_warmup_seed =
            value.get("warmup").and_then(|t| t.get("seed")).is_some();
        let file_root = config.data_root.take();
        config = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if config.data_root.is_none() {
            config.data_root = file_root;
        }
    }

    if let Some(data) = &overrides.data {
        config.data_root = Some(data.clone());
    }
    if let Some(s) = &overrides.strategy {
        config.train.strategy = s.parse()?;
    }
    if let Some(r) = &overrides.ratio {
        config.train.ratio = r.parse::<usize>().expect("validated by clap");
        if !file_sets_patch {
            config.train.patch_size = default_patch_size(config.train.ratio);
        }
    } else if !file_sets_patch {
        config.train.patch_size = default_patch_size(config.train.ratio);
    }
    if let Some(e) = overrides.epochs {
        config.train.epochs = e;
    } else if !file_sets_epochs && config.train.strategy == Strategy::Distillation {
        config.train.epochs = 100;
    }
    if let Some(seed) = overrides.seed {
        config.train.seed = seed;
        config.warmup.seed = seed;
    } else if !file_sets_warmup_seed {
        config.warmup.seed = config.train.seed;
    }
    if let Some(d) = &overrides.device {
        config.train.device = d.clone();
    }
    config.warmup.render.background = config.background;
    config.train.render.background = config.background;
    Ok(config)
}

fn config_violations(violations: &[String]) -> Error {
    Error::Config(format!(
        "configuration invalid:\n  - {}",
        violations.join("\n  - ")
    ))
}

/// Checks every schema rule and reports all violations at once, so a broken
/// config is fixed in one round trip rather than one error at a time.
pub fn validate_run_config(config: &RunConfig) -> Result<()> {
    let mut v: Vec<String> = Vec::new();
    if config.schema_version != RUN_SCHEMA_VERSION {
        v.push(format!(
            "schema_version: expected {RUN_SCHEMA_VERSION}, got {}",
            config.schema_version
        ));
    }
    if config.downsample == 0 {
        v.push("downsample: must be at least 1".into());
    }
    for (i, b) in config.background.iter().enumerate() {
        if !(0.0..=1.0).contains(b) {
            v.push(format!("background[{i}]: {b} outside [0, 1]"));
        }
    }

    let t = &config.train;
    if ![1, 2, 4, 8].contains(&t.ratio) {
        v.push(format!("train.ratio: {} is not one of 1, 2, 4, 8", t.ratio));
    } else {
        if t.patch_size == 0 || t.patch_size % t.ratio != 0 {
            v.push(format!(
                "train.patch_size: {} is not a positive multiple of ratio {}",
                t.patch_size, t.ratio
            ));
        } else if t.strategy.uses_network_sr() && t.patch_size / t.ratio < MIN_INPUT_SIDE {
            v.push(format!(
                "train.patch_size: {} at ratio {} gives LR patches below the head's {MIN_INPUT_SIDE}-pixel minimum",
                t.patch_size, t.ratio
            ));
        }
    }
    if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
        v.push(format!("train.learning_rate: {} must be positive and finite", t.learning_rate));
    }
    if t.checkpoint_every == 0 {
        v.push("train.checkpoint_every: must be at least 1".into());
    }
    if t.device != "cpu" {
        v.push(format!("train.device: {:?} unsupported (only \"cpu\")", t.device));
    }
    if t.strategy.uses_network_sr() && (t.sr_blocks == 0 || t.sr_channels == 0) {
        v.push(format!(
            "train.sr_blocks/sr_channels: {}x{} — both must be at least 1",
            t.sr_blocks, t.sr_channels
        ));
    }
    if t.strategy == Strategy::Pretrained && t.pretrained_sr.is_none() {
        v.push("train.pretrained_sr: required by the Pretrained strategy".into());
    }
    if t.strategy == Strategy::Distillation && config.teacher_checkpoint.is_none() {
        v.push("teacher_checkpoint: required by the Distillation strategy".into());
    }
    if let Some(a) = &t.augment {
        if !(0.0..=MAX_ROTATION_DEG).contains(&a.max_rotation_deg) {
            v.push(format!(
                "train.augment.max_rotation_deg: {} outside [0, {MAX_ROTATION_DEG}]",
                a.max_rotation_deg
            ));
        }
        if !(0.0..=1.0).contains(&a.hflip_prob) {
            v.push(format!("train.augment.hflip_prob: {} outside [0, 1]", a.hflip_prob));
        }
    }
    for (label, o) in [("train", &t.optimizer), ("warmup", &config.warmup.optimizer)] {
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            v.push(format!("{label}.optimizer: betas ({}, {}) outside [0, 1)", o.beta1, o.beta2));
        }
        if !(o.epsilon.is_finite() && o.epsilon > 0.0) {
            v.push(format!("{label}.optimizer.epsilon: {} must be positive", o.epsilon));
        }
    }
    for (label, r) in [("train.render", &t.render), ("warmup.render", &config.warmup.render)] {
        if r.n_samples == 0 {
            v.push(format!("{label}.n_samples: must be at least 1"));
        }
        if r.chunk_size == 0 {
            v.push(format!("{label}.chunk_size: must be at least 1"));
        }
        if r.weight_threshold < 0.0 {
            v.push(format!("{label}.weight_threshold: must be non-negative"));
        }
    }

    let w = &config.warmup;
    if w.iters > 0 && w.batch_size == 0 {
        v.push("warmup.batch_size: must be at least 1".into());
    }
    for (label, lr) in [("lr_grid", w.lr_grid), ("lr_network", w.lr_network)] {
        if !(lr.is_finite() && lr > 0.0) {
            v.push(format!("warmup.{label}: {lr} must be positive and finite"));
        }
    }
    if !(w.lr_final_factor > 0.0 && w.lr_final_factor <= 1.0) {
        v.push(format!("warmup.lr_final_factor: {} outside (0, 1]", w.lr_final_factor));
    }
    for pair in w.upsample_schedule.windows(2) {
        if pair[1].0 <= pair[0].0 {
            v.push(format!(
                "warmup.upsample_schedule: iterations {} then {} are not strictly increasing",
                pair[0].0, pair[1].0
            ));
            break;
        }
    }
    for (at, res) in &w.upsample_schedule {
        if res.iter().any(|&r| r < 2) {
            v.push(format!("warmup.upsample_schedule: resolution {res:?} at {at} below 2"));
        }
    }

    let f = &config.field;
    if f.resolution.iter().any(|&r| r < 2) {
        v.push(format!("field.resolution: {:?} has sides below 2", f.resolution));
    }
    if f.density_rank == 0 || f.appearance_rank == 0 {
        v.push(format!(
            "field.density_rank/appearance_rank: {}/{} — both must be at least 1",
            f.density_rank, f.appearance_rank
        ));
    }
    if f.hidden_dim == 0 {
        v.push("field.hidden_dim: must be at least 1".into());
    }

    if let Some(a) = &config.ablate {
        if a.strategies.is_empty() {
            v.push("ablate.strategies: must list at least one strategy".into());
        }
        if a.seeds.is_empty() {
            v.push("ablate.seeds: must list at least one seed".into());
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(config_violations(&v))
    }
}

// ---------------------------------------------------------------------------
// Manifest.
// ---------------------------------------------------------------------------

/// The single per-run record: what ran, with which resolved config, when,
/// and which outputs it produced. Exactly one per run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub device: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// Paths relative to the run directory; all exist when the command
    /// exits zero.
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            device: config.train.device.clone(),
            seed: config.train.seed,
            started_unix: unix_now(),
            finished_unix: None,
            outputs: Vec::new(),
            config,
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(run_dir: &Path) -> Result<RunManifest> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Records completion: every declared output must exist under the run
    /// directory, upholding "exit zero implies all declared outputs exist".
    pub fn finish(&mut self, run_dir: &Path, outputs: Vec<String>) -> Result<()> {
        for rel in &outputs {
            if !run_dir.join(rel).exists() {
                return Err(Error::Missing(format!(
                    "declared output {rel} missing under {}",
                    run_dir.display()
                )));
            }
        }
        self.outputs = outputs;
        self.finished_unix = Some(unix_now());
        self.write(run_dir)
    }
}

/// Claims a run directory: creates it with a fresh manifest, or — with
/// `resume` — loads the existing manifest so the persisted resolved config
/// governs the continued run.
fn claim_run_dir(
    run_dir: &Path,
    command: &str,
    config: RunConfig,
    resume: bool,
) -> Result<RunManifest> {
    if run_dir.join(MANIFEST_FILE).exists() {
        if !resume {
            return Err(Error::Config(format!(
                "{} already contains a manifest; pass --resume to continue it",
                run_dir.display()
            )));
        }
        let manifest = RunManifest::read(run_dir)?;
        if manifest.command != command {
            return Err(Error::Config(format!(
                "{} was created by `{}`, not `{command}`",
                run_dir.display(),
                manifest.command
            )));
        }
        return Ok(manifest);
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.to_path_buf(), e))?;
    let manifest = RunManifest::new(command, config);
    manifest.write(run_dir)?;
    let toml_text = toml::to_string_pretty(&manifest.config)
        .map_err(|e| Error::Config(format!("serializing resolved config: {e}")))?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, toml_text).map_err(|e| Error::io(cfg_path, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Command-line surface.
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "nerfsr",
    version,
    about = "Low-resolution radiance fields with a learned super-resolution head"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warm up the backbone and train the field + head end to end.
    Train(TrainArgs),
    /// Render a checkpoint along dataset poses to PNGs plus a timing file.
    Render(RenderArgs),
    /// Score a checkpoint against ground truth and write report twins.
    Eval(EvalArgs),
    /// Run the strategy-by-seed matrix and aggregate a comparative report.
    Ablate(AblateArgs),
    /// Profile render time and model size for one or more checkpoints.
    Benchmark(BenchmarkArgs),
    /// Generate the procedural toy scene as an on-disk dataset.
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Run directory (default: runs/<strategy>-x<ratio>-seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue an existing run directory instead of refusing to touch it.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Training checkpoint (.nsr) or field archive to render.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory supplying the poses.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset pre-downsample factor.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
    /// Split whose poses are rendered.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `off` renders the low-resolution backbone output directly
    /// (diagnostic mode).
    #[arg(long, default_value = "on", value_parser = ["on", "off"])]
    pub sr: String,
    /// Upscaling ratio for checkpoints without a head (Bilinear runs or
    /// bare field archives).
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Timed passes over the split (first pass is preceded by one untimed
    /// warm-up render).
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Samples per ray.
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory; evaluates its best checkpoint (falls back to latest).
    #[arg(long, conflicts_with = "checkpoint")]
    pub run: Option<PathBuf>,
    /// Explicit checkpoint to evaluate instead of a run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (defaults to the run's configured dataset).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset pre-downsample factor.
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Split scored against ground truth.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory (default: <run>/eval or <checkpoint dir>/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Method label in the report (default: the checkpoint's strategy).
    #[arg(long)]
    pub method: Option<String>,
    /// Scene label in the report (default: dataset directory name).
    #[arg(long)]
    pub scene: Option<String>,
    /// Time renders (makes the report non-reproducible bit for bit).
    #[arg(long)]
    pub time: bool,
    /// Perceptual-metric weights archive.
    #[arg(long)]
    pub perceptual: Option<PathBuf>,
    /// Upscaling ratio for checkpoints without a head.
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Skip writing per-view render/ground-truth PNGs.
    #[arg(long)]
    pub no_renders: bool,
    /// Samples per ray.
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Matrix output directory (cells run in <out>/cells/...).
    #[arg(long)]
    pub out: PathBuf,
    /// Re-enter an existing matrix, skipping completed cells.
    #[arg(long)]
    pub resume: bool,
    /// Run cells in parallel; wall-clock columns are dropped from the
    /// summary because concurrent cells compete for cores.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Checkpoints to profile (repeatable).
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Dataset directory supplying the cameras.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset pre-downsample factor.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
    /// Split whose cameras are profiled.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Timed repeats per pipeline (one extra warm-up render is excluded).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Output directory for benchmark.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Upscaling ratio for checkpoints without a head.
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Samples per ray.
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Toy scene spec (JSON); flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Executes a parsed command. The binary maps `Err` to a nonzero exit.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let dir = cmd_train(&args)?;
            println!("run complete: {}", dir.display());
            Ok(())
        }
        Command::Render(args) => cmd_render(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Benchmark(args) => cmd_benchmark(&args),
        Command::MakeToy(args) => cmd_make_toy(&args),
    }
}

fn env_data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

fn require_data_root(config: &RunConfig) -> Result<PathBuf> {
    let root = config.data_root.clone().ok_or_else(|| {
        Error::Config(format!(
            "no dataset: set data_root in the config, pass --data, or export {DATA_ROOT_ENV}"
        ))
    })?;
    if !root.exists() {
        return Err(Error::Dataset(format!("dataset path {} does not exist", root.display())));
    }
    Ok(root)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct WarmupRecord {
    iters: usize,
    seconds: f64,
    final_loss: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TimingRecord {
    warmup_seconds: f64,
    pseudo_seconds: f64,
    end_to_end_seconds: f64,
    total_seconds: f64,
}

/// Loads a radiance field from either a bare field archive or a full
/// training checkpoint.
pub fn load_field_like(path: &Path) -> Result<RadianceField> {
    let archive = Archive::read(path)?;
    match archive.kind.as_str() {
        "field" => RadianceField::from_archive(&archive),
        "checkpoint" => Ok(TrainState::from_archive(&archive)?.field),
        other => Err(Error::archive(
            path,
            format!("expected a field or checkpoint archive, got kind {other:?}"),
        )),
    }
}

/// The training pipeline behind both `train` and each `ablate` cell:
/// warm-up (cached in the run directory), end-to-end training with
/// checkpoints, and a timing record. Returns the final state.
fn run_training(config: &RunConfig, run_dir: &Path, resume: bool) -> Result<TrainState> {
    let root = require_data_root(config)?;
    let dataset = load_dataset(&root, config.downsample, config.background)?;
    let strategy = config.train.strategy;
    let latest = run_dir.join("latest.nsr");
    let warmup_path = run_dir.join("warmup.nsr");
    let warmup_meta_path = run_dir.join("warmup.json");

    let mut warmup_seconds = 0.0;
    if warmup_path.exists() {
        if let Ok(text) = std::fs::read_to_string(&warmup_meta_path) {
            if let Ok(rec) = serde_json::from_str::<WarmupRecord>(&text) {
                warmup_seconds = rec.seconds;
            }
        }
    }

    let mut state = if resume && latest.exists() {
        TrainState::load(&latest)?
    } else {
        let field = if strategy == Strategy::Scratch {
            // Scratch means exactly that: no LR warm-up, random init.
            RadianceField::init(field_config_for(config, &dataset), config.train.seed)
        } else if warmup_path.exists() {
            RadianceField::from_archive(&Archive::read(&warmup_path)?)?
        } else {
            let lr_dataset = crate::data::downsample_dataset(&dataset, config.train.ratio as u32)?;
            let init =
                RadianceField::init(field_config_for(config, &dataset), config.train.seed);
            let outcome = warmup_backbone(init, &lr_dataset, &config.warmup, Some(run_dir))?;
            warmup_seconds = outcome.seconds;
            outcome.field.to_archive()?.write(&warmup_path)?;
            let record = WarmupRecord {
                iters: config.warmup.iters,
                seconds: outcome.seconds,
                final_loss: outcome.losses.last().copied(),
            };
            std::fs::write(&warmup_meta_path, serde_json::to_string_pretty(&record)?)
                .map_err(|e| Error::io(warmup_meta_path.clone(), e))?;
            outcome.field
        };
        init_end_to_end_state(field, &dataset, &config.train)?
    };
    state.wall_clock.warmup_seconds = warmup_seconds;

    state = if strategy == Strategy::Distillation {
        let teacher_path = config.teacher_checkpoint.as_ref().ok_or_else(|| {
            Error::Missing("the Distillation strategy needs teacher_checkpoint".into())
        })?;
        let teacher = load_field_like(teacher_path)?;
        distill(&teacher, state, &dataset, &config.train, &run_dir.join("pseudo"), Some(run_dir))?
    } else {
        train_end_to_end(state, &dataset, &config.train, Some(run_dir))?
    };
    if !latest.exists() {
        // Warm-up-only runs (epochs 0) still leave a loadable state behind.
        state.save(&latest)?;
    }

    let timing = TimingRecord {
        warmup_seconds: state.wall_clock.warmup_seconds,
        pseudo_seconds: state.wall_clock.pseudo_seconds,
        end_to_end_seconds: state.wall_clock.end_to_end_seconds,
        total_seconds: state.wall_clock.total(),
    };
    let timing_path = run_dir.join("timing.json");
    std::fs::write(&timing_path, serde_json::to_string_pretty(&timing)?)
        .map_err(|e| Error::io(timing_path, e))?;
    Ok(state)
}

fn field_config_for(config: &RunConfig, dataset: &SceneDataset) -> FieldConfig {
    // The scene bounds come from the data, not the config file: the loaders
    // know each format's convention (NDC captures use the unit cube).
    FieldConfig { bounding_box: dataset.bounding_box, ..config.field.clone() }
}

fn default_run_dir(config: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!(
        "{}-x{}-seed{}",
        strategy_slug(config.train.strategy),
        config.train.ratio,
        config.train.seed
    ))
}

fn strategy_slug(strategy: Strategy) -> String {
    strategy.table_name().to_lowercase().replace('-', "")
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let config = resolve_config(&args.overrides, env_data_root())?;
    validate_run_config(&config)?;
    let run_dir = args.out.clone().unwrap_or_else(|| default_run_dir(&config));
    let mut manifest = claim_run_dir(&run_dir, "train", config, args.resume)?;
    let config = manifest.config.clone();
    require_data_root(&config)?;

    let state = run_training(&config, &run_dir, args.resume)?;

    let mut outputs: Vec<String> = vec![
        CONFIG_FILE.into(),
        "latest.nsr".into(),
        "timing.json".into(),
    ];
    for candidate in ["warmup.nsr", "warmup.json", "best.nsr", "train_log.jsonl"] {
        if run_dir.join(candidate).exists() {
            outputs.push(candidate.into());
        }
    }
    manifest.finish(&run_dir, outputs)?;

    println!(
        "trained {} at x{} for {} epochs ({} iterations); wall clock {:.1}s",
        state.strategy,
        config.train.ratio,
        state.epoch,
        state.iteration,
        state.wall_clock.total()
    );
    if let Some((epoch, db)) = state.best_val {
        println!("best held-out PSNR {db:.2} dB at epoch {epoch}");
    }
    Ok(run_dir)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

/// Builds the evaluation pipeline a checkpoint describes. Checkpoints with a
/// head upscale with it; checkpoints without one (Bilinear runs, bare field
/// archives) use fixed bilinear upscaling at `ratio_flag`, or render the
/// backbone directly when no ratio is given.
fn pipeline_from_checkpoint(
    path: &Path,
    ratio_flag: Option<usize>,
    render: RenderConfig,
    ndc: bool,
) -> Result<(RenderPipeline, usize, Option<Strategy>)> {
    let archive = Archive::read(path)?;
    let (field, sr, strategy) = match archive.kind.as_str() {
        "field" => (RadianceField::from_archive(&archive)?, None, None),
        "checkpoint" => {
            let state = TrainState::from_archive(&archive)?;
            (state.field, state.sr, Some(state.strategy))
        }
        other => {
            return Err(Error::archive(
                path,
                format!("expected a field or checkpoint archive, got kind {other:?}"),
            ))
        }
    };
    let (upscaler, ratio) = match (sr, ratio_flag) {
        (Some(net), flag) => {
            let ratio = net.ratio() as usize;
            if let Some(f) = flag {
                if f != ratio {
                    return Err(Error::InvalidArgument(format!(
                        "--ratio {f} conflicts with the checkpoint's x{ratio} head"
                    )));
                }
            }
            (Upscaler::Network(net), ratio)
        }
        (None, Some(f)) if f > 1 => (Upscaler::Bilinear(f), f),
        (None, _) => (Upscaler::None, 1),
    };
    Ok((RenderPipeline { field, upscaler, config: render, ndc }, ratio, strategy))
}

fn split_views<'d>(dataset: &'d SceneDataset, split: &str) -> Result<&'d [crate::data::View]> {
    let views = match split {
        "train" => &dataset.train,
        "val" => &dataset.val,
        "test" => &dataset.test,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train, val, or test"
            )))
        }
    };
    if views.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} has no views")));
    }
    Ok(views)
}

fn sanitize(name: &str) -> String {
    name.trim_start_matches("./").replace('/', "_")
}

#[derive(Debug, Serialize, Deserialize)]
struct RenderTiming {
    n_views: usize,
    repeats: usize,
    per_pass_mean_seconds: Vec<f64>,
    mean_seconds: f64,
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let data = args
        .data
        .clone()
        .or_else(env_data_root)
        .ok_or_else(|| Error::Config(format!("pass --data or export {DATA_ROOT_ENV}")))?;
    let dataset = load_dataset(&data, args.downsample, [1.0, 1.0, 1.0])?;
    let mut render = RenderConfig { background: dataset.background, ..RenderConfig::default() };
    if let Some(n) = args.n_samples {
        render.n_samples = n;
    }
    let (mut pipeline, ratio, _) =
        pipeline_from_checkpoint(&args.checkpoint, args.ratio, render, dataset.ndc)?;
    let views = split_views(&dataset, &args.split)?;
    if args.repeats == 0 {
        return Err(Error::InvalidArgument("--repeats must be at least 1".into()));
    }

    let sr_off = args.sr == "off";
    if sr_off {
        // Diagnostic mode: emit what the backbone sees, at its resolution.
        pipeline.upscaler = Upscaler::None;
    }
    let cameras: Vec<_> = views
        .iter()
        .map(|v| {
            if sr_off && ratio > 1 {
                downscale_camera(&v.camera, ratio)
            } else {
                Ok(v.camera.clone())
            }
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.clone(), e))?;
    pipeline.render_view(&cameras[0])?; // warm-up, untimed
    let mut per_pass = Vec::with_capacity(args.repeats);
    for pass in 0..args.repeats {
        let mut pass_seconds = 0.0;
        for (view, camera) in views.iter().zip(&cameras) {
            let t0 = Instant::now();
            let image = pipeline.render_view(camera)?;
            pass_seconds += t0.elapsed().as_secs_f64();
            if pass == 0 {
                let clamped = image.mapv(|v| v.clamp(0.0, 1.0));
                png::save_rgb(&args.out.join(format!("{}.png", sanitize(&view.name))), &clamped)?;
            }
        }
        per_pass.push(pass_seconds / views.len() as f64);
    }
    let timing = RenderTiming {
        n_views: views.len(),
        repeats: args.repeats,
        mean_seconds: per_pass.iter().sum::<f64>() / per_pass.len() as f64,
        per_pass_mean_seconds: per_pass,
    };
    let timing_path = args.out.join("timing.json");
    std::fs::write(&timing_path, serde_json::to_string_pretty(&timing)?)
        .map_err(|e| Error::io(timing_path, e))?;
    println!(
        "rendered {} view(s) to {} ({:.3}s per frame)",
        views.len(),
        args.out.display(),
        timing.mean_seconds
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn checkpoint_for_eval(args: &EvalArgs) -> Result<PathBuf> {
    if let Some(path) = &args.checkpoint {
        return Ok(path.clone());
    }
    let run = args.run.as_ref().ok_or_else(|| {
        Error::Config("pass --run <dir> or --checkpoint <file>".into())
    })?;
    for name in ["best.nsr", "latest.nsr"] {
        let candidate = run.join(name);
        if candidate.exists() {
            return Ok(candidate);
        }
    }
    Err(Error::Missing(format!(
        "{} has neither best.nsr nor latest.nsr",
        run.display()
    )))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let checkpoint = checkpoint_for_eval(args)?;
    let (data, downsample) = match (&args.data, &args.run) {
        (Some(d), _) => (d.clone(), args.downsample.unwrap_or(1)),
        (None, Some(run)) => {
            let manifest = RunManifest::read(run)?;
            let root = require_data_root(&manifest.config)?;
            (root, args.downsample.unwrap_or(manifest.config.downsample))
        }
        (None, None) => (
            env_data_root()
                .ok_or_else(|| Error::Config(format!("pass --data or export {DATA_ROOT_ENV}")))?,
            args.downsample.unwrap_or(1),
        ),
    };
    let dataset = load_dataset(&data, downsample, [1.0, 1.0, 1.0])?;
    let mut render = RenderConfig { background: dataset.background, ..RenderConfig::default() };
    if let Some(n) = args.n_samples {
        render.n_samples = n;
    }
    let (pipeline, _, strategy) =
        pipeline_from_checkpoint(&checkpoint, args.ratio, render, dataset.ndc)?;
    let views = split_views(&dataset, &args.split)?;

    let scene = args.scene.clone().unwrap_or_else(|| {
        data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
    });
    let method = args.method.clone().unwrap_or_else(|| {
        strategy.map(|s| s.table_name().to_string()).unwrap_or_else(|| "backbone".into())
    });
    let mut opts = EvalOptions::new(&scene, &method, &dataset.fingerprint());
    opts.time_renders = args.time;
    opts.perceptual_weights = args.perceptual.clone();

    let (report, renders) = evaluate_views(&pipeline, views, &opts)?;

    let out = args.out.clone().unwrap_or_else(|| {
        args.run
            .clone()
            .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf())
            .join("eval")
    });
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
    let json_path = out.join("report.json");
    std::fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(json_path, e))?;
    let table = render_table(std::slice::from_ref(&report));
    let txt_path = out.join("report.txt");
    std::fs::write(&txt_path, &table).map_err(|e| Error::io(txt_path, e))?;
    if !args.no_renders {
        save_renders(&out.join("renders"), views, &renders)?;
    }
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellResult {
    strategy: Strategy,
    seed: u64,
    mean_psnr_db: f64,
    mean_ssim: f64,
    train_seconds: f64,
    completed_unix: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AblateRow {
    strategy: Strategy,
    seeds_ok: usize,
    seeds_failed: usize,
    psnr_mean_db: Option<f64>,
    psnr_std_db: Option<f64>,
    /// Mean train wall-clock in minutes; absent when cells ran in parallel.
    train_minutes_mean: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AblateSummary {
    timing_valid: bool,
    rows: Vec<AblateRow>,
    failures: Vec<String>,
}

fn run_cell(base: &RunConfig, strategy: Strategy, seed: u64, cell_dir: &Path) -> Result<CellResult> {
    let result_path = cell_dir.join("cell_result.json");
    if let Ok(text) = std::fs::read_to_string(&result_path) {
        if let Ok(cached) = serde_json::from_str::<CellResult>(&text) {
            return Ok(cached); // completed cell: skip, reuse the recorded result
        }
    }
    let mut config = base.clone();
    config.train.strategy = strategy;
    config.train.seed = seed;
    config.warmup.seed = seed;
    config.ablate = None;
    validate_run_config(&config)?;
    let mut manifest = claim_run_dir(cell_dir, "train", config, true)?;
    let config = manifest.config.clone();
    let state = run_training(&config, cell_dir, true)?;

    let root = require_data_root(&config)?;
    let dataset = load_dataset(&root, config.downsample, config.background)?;
    let views = split_views(&dataset, "test")?;
    let pipeline = state.pipeline(
        config.train.ratio,
        RenderConfig { stratified: false, seed: 0, background: dataset.background, ..config.train.render },
        dataset.ndc,
    );
    let opts = EvalOptions::new("ablation", strategy.table_name(), &dataset.fingerprint());
    let (report, _) = evaluate_views(&pipeline, views, &opts)?;

    let mut outputs: Vec<String> = vec![CONFIG_FILE.into(), "latest.nsr".into(), "timing.json".into()];
    for candidate in ["warmup.nsr", "warmup.json", "best.nsr", "train_log.jsonl"] {
        if cell_dir.join(candidate).exists() {
            outputs.push(candidate.into());
        }
    }
    let result = CellResult {
        strategy,
        seed,
        mean_psnr_db: report.mean_psnr_db,
        mean_ssim: report.mean_ssim,
        train_seconds: state.wall_clock.total(),
        completed_unix: unix_now(),
    };
    std::fs::write(&result_path, serde_json::to_string_pretty(&result)?)
        .map_err(|e| Error::io(result_path.clone(), e))?;
    outputs.push("cell_result.json".into());
    manifest.finish(cell_dir, outputs)?;
    Ok(result)
}

fn ablate_table(summary: &AblateSummary) -> String {
    let mut out = String::new();
    out.push_str("strategy        seeds  psnr_db (mean+/-std)  train_min\n");
    for row in &summary.rows {
        let psnr = match (row.psnr_mean_db, row.psnr_std_db) {
            (Some(m), Some(s)) => format!("{m:.2} +/- {s:.2}"),
            _ => "--".into(),
        };
        let minutes = match row.train_minutes_mean {
            Some(m) if summary.timing_valid => format!("{m:.2}"),
            _ => "--".into(),
        };
        out.push_str(&format!(
            "{:<15} {:>5}  {:<20}  {}\n",
            row.strategy.table_name(),
            format!("{}/{}", row.seeds_ok, row.seeds_ok + row.seeds_failed),
            psnr,
            minutes
        ));
    }
    for failure in &summary.failures {
        out.push_str(&format!("failed: {failure}\n"));
    }
    out
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut base = resolve_config(&args.overrides, env_data_root())?;
    let matrix = base.ablate.clone().ok_or_else(|| {
        Error::Config("ablate needs an [ablate] section (strategies, seeds) in the config".into())
    })?;
    let parallel = args.parallel || matrix.parallel;
    base.ablate = Some(matrix.clone());
    validate_run_config(&base)?;
    require_data_root(&base)?;

    let out = &args.out;
    if out.join(MANIFEST_FILE).exists() && !args.resume {
        return Err(Error::Config(format!(
            "{} already contains a manifest; pass --resume to continue it",
            out.display()
        )));
    }
    let mut manifest = claim_run_dir(out, "ablate", base.clone(), args.resume)?;

    let cells: Vec<(Strategy, u64)> = matrix
        .strategies
        .iter()
        .flat_map(|&s| matrix.seeds.iter().map(move |&k| (s, k)))
        .collect();
    let cell_dir =
        |s: Strategy, k: u64| out.join("cells").join(format!("{}-seed{k}", strategy_slug(s)));

    let results: Vec<(Strategy, u64, Result<CellResult>)> = if parallel {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(s, k)| (s, k, run_cell(&base, s, k, &cell_dir(s, k))))
            .collect()
    } else {
        cells.iter().map(|&(s, k)| (s, k, run_cell(&base, s, k, &cell_dir(s, k)))).collect()
    };

    let mut by_strategy: BTreeMap<&'static str, (Strategy, Vec<CellResult>, usize)> =
        BTreeMap::new();
    let mut failures = Vec::new();
    for &strategy in &matrix.strategies {
        by_strategy.entry(strategy.table_name()).or_insert((strategy, Vec::new(), 0));
    }
    for (strategy, seed, outcome) in results {
        let entry = by_strategy.get_mut(strategy.table_name()).expect("seeded above");
        match outcome {
            Ok(cell) => entry.1.push(cell),
            Err(e) => {
                entry.2 += 1;
                failures.push(format!("{} seed {seed}: {e}", strategy.table_name()));
            }
        }
    }

    let rows: Vec<AblateRow> = matrix
        .strategies
        .iter()
        .map(|s| {
            let (strategy, cells, failed) = &by_strategy[s.table_name()];
            let n = cells.len();
            let (psnr_mean, psnr_std, minutes) = if n > 0 {
                let mean = cells.iter().map(|c| c.mean_psnr_db).sum::<f64>() / n as f64;
                let var = cells.iter().map(|c| (c.mean_psnr_db - mean).powi(2)).sum::<f64>()
                    / n as f64;
                let minutes =
                    cells.iter().map(|c| c.train_seconds).sum::<f64>() / n as f64 / 60.0;
                (Some(mean), Some(var.sqrt()), Some(minutes))
            } else {
                (None, None, None)
            };
            AblateRow {
                strategy: *strategy,
                seeds_ok: n,
                seeds_failed: *failed,
                psnr_mean_db: psnr_mean,
                psnr_std_db: psnr_std,
                train_minutes_mean: if parallel { None } else { minutes },
            }
        })
        .collect();

    let summary = AblateSummary { timing_valid: !parallel, rows, failures };
    let json_path = out.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(json_path, e))?;
    let table = ablate_table(&summary);
    let txt_path = out.join("summary.txt");
    std::fs::write(&txt_path, &table).map_err(|e| Error::io(txt_path, e))?;
    manifest.finish(out, vec![CONFIG_FILE.into(), "summary.json".into(), "summary.txt".into()])?;
    print!("{table}");
    if summary.rows.iter().any(|r| r.seeds_ok == 0) {
        return Err(Error::Config("ablation produced no successful run for some strategy".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct BenchmarkRow {
    label: String,
    mean_seconds: f64,
    std_seconds: f64,
    model_bytes: u64,
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let data = args
        .data
        .clone()
        .or_else(env_data_root)
        .ok_or_else(|| Error::Config(format!("pass --data or export {DATA_ROOT_ENV}")))?;
    let dataset = load_dataset(&data, args.downsample, [1.0, 1.0, 1.0])?;
    let views = split_views(&dataset, &args.split)?;
    let cameras: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    let mut render = RenderConfig { background: dataset.background, ..RenderConfig::default() };
    if let Some(n) = args.n_samples {
        render.n_samples = n;
    }

    let mut rows = Vec::new();
    for path in &args.checkpoint {
        let (pipeline, _, _) =
            pipeline_from_checkpoint(path, args.ratio, render.clone(), dataset.ndc)?;
        let profile = profile_render(&pipeline, &cameras, args.repeats)?;
        rows.push(BenchmarkRow {
            label: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            mean_seconds: profile.mean_seconds,
            std_seconds: profile.std_seconds,
            model_bytes: profile.bytes.total,
        });
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.clone(), e))?;
    let json_path = args.out.join("benchmark.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&rows)?)
        .map_err(|e| Error::io(json_path, e))?;
    println!("label  mean_s  std_s  size_mb");
    for row in &rows {
        println!(
            "{}  {:.3}  {:.3}  {:.2}",
            row.label,
            row.mean_seconds,
            row.std_seconds,
            row.model_bytes as f64 / 1e6
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// make-toy
// ---------------------------------------------------------------------------

pub fn cmd_make_toy(args: &MakeToyArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
            serde_json::from_str::<ToySceneSpec>(&text)?
        }
        None => ToySceneSpec::default(),
    };
    if let Some(size) = args.image_size {
        spec.image_size = size;
    }
    if let Some(n) = args.train {
        spec.n_train = n;
    }
    if let Some(n) = args.val {
        spec.n_val = n;
    }
    if let Some(n) = args.test {
        spec.n_test = n;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dataset = persist_toy_scene(&spec, &args.out)?;
    println!(
        "wrote toy scene to {}: {} train / {} val / {} test views at {}x{}",
        args.out.display(),
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        spec.image_size,
        spec.image_size
    );
    Ok(())
}
