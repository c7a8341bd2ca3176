use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

/// Implicit pose distributions on SO(3).
#[derive(Debug, Parser)]
#[command(name = "so3pdf", version, args_override_self = true)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log level on standard error: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Equivolumetric grid files.
    #[command(subcommand)]
    Grid(GridCommand),
    /// Generate a symmetric-solids dataset.
    Synth(SynthArgs),
    /// Write the full ground-truth orbit of one rotation.
    Orbit(OrbitArgs),
    /// Train a model.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Pose estimate and modes for one descriptor.
    Predict(PredictArgs),
    /// Render a distribution dump as SVG.
    Viz(VizArgs),
    /// Time full-grid evaluation.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum GridCommand {
    Gen(GridGenArgs),
}

#[derive(Debug, Args)]
pub struct GridGenArgs {
    /// Plain-text `key = value` file; keys are flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub level: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// tet, cube, ico, cone, cyl or sphereX.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = so3pdf::symsol::DEFAULT_DESCRIPTOR_DIM)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OrbitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: String,
    /// Quaternion `w,x,y,z`.
    #[arg(long, allow_hyphen_values = true)]
    pub quaternion: String,
    /// Points per continuous symmetry circle.
    #[arg(long, default_value_t = so3pdf::symsol::DEFAULT_ORBIT_SAMPLES)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration; every key is also a flag of the same name.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Log every this many steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,

    #[arg(long = "descriptor_dim", visible_alias = "descriptor-dim")]
    pub descriptor_dim: Option<String>,
    #[arg(long = "m")]
    pub m: Option<String>,
    #[arg(long = "hidden_width", visible_alias = "hidden-width")]
    pub hidden_width: Option<String>,
    #[arg(long = "hidden_layers", visible_alias = "hidden-layers")]
    pub hidden_layers: Option<String>,
    #[arg(long = "pe_include_raw", visible_alias = "pe-include-raw")]
    pub pe_include_raw: Option<String>,
    #[arg(long = "rotation_format", visible_alias = "rotation-format")]
    pub rotation_format: Option<String>,
    #[arg(long = "query_count", visible_alias = "query-count")]
    pub query_count: Option<String>,
    /// rotated_grid or random.
    #[arg(long = "query_mode", visible_alias = "query-mode")]
    pub query_mode: Option<String>,
    #[arg(long = "base_lr", visible_alias = "base-lr")]
    pub base_lr: Option<String>,
    #[arg(long = "warmup_steps", visible_alias = "warmup-steps")]
    pub warmup_steps: Option<String>,
    #[arg(long = "total_steps", visible_alias = "total-steps")]
    pub total_steps: Option<String>,
    #[arg(long = "batch_size", visible_alias = "batch-size")]
    pub batch_size: Option<String>,
    #[arg(long = "adam_beta1", visible_alias = "adam-beta1")]
    pub adam_beta1: Option<String>,
    #[arg(long = "adam_beta2", visible_alias = "adam-beta2")]
    pub adam_beta2: Option<String>,
    #[arg(long = "adam_eps", visible_alias = "adam-eps")]
    pub adam_eps: Option<String>,
    #[arg(long = "seed")]
    pub seed: Option<String>,
    #[arg(long = "clip_grad_norm", visible_alias = "clip-grad-norm")]
    pub clip_grad_norm: Option<String>,
    /// Sets query_count to the size of this grid level.
    #[arg(long = "grid_level", visible_alias = "grid-level")]
    pub grid_level: Option<String>,
}

impl TrainArgs {
    /// Overrides in the fixed order of `RunConfig::KEYS`.
    pub fn overrides(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("descriptor_dim", &self.descriptor_dim),
            ("m", &self.m),
            ("hidden_width", &self.hidden_width),
            ("hidden_layers", &self.hidden_layers),
            ("pe_include_raw", &self.pe_include_raw),
            ("rotation_format", &self.rotation_format),
            ("query_count", &self.query_count),
            ("query_mode", &self.query_mode),
            ("base_lr", &self.base_lr),
            ("warmup_steps", &self.warmup_steps),
            ("total_steps", &self.total_steps),
            ("batch_size", &self.batch_size),
            ("adam_beta1", &self.adam_beta1),
            ("adam_beta2", &self.adam_beta2),
            ("adam_eps", &self.adam_eps),
            ("seed", &self.seed),
            ("clip_grad_norm", &self.clip_grad_norm),
            ("grid_level", &self.grid_level),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "grid-level", visible_alias = "grid_level")]
    pub grid_level: u32,
    #[arg(long)]
    pub report: PathBuf,
    /// Per-record CSV (default: the report path with a `.csv` extension).
    #[arg(long = "errors-csv", visible_alias = "errors_csv")]
    pub errors_csv: Option<PathBuf>,
    /// Also report top-1 through top-K metrics.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long = "topk-threshold", visible_alias = "topk_threshold", default_value_t = 15.0)]
    pub topk_threshold: f64,
    #[arg(long = "ascent-steps", visible_alias = "ascent_steps", default_value_t = 100)]
    pub ascent_steps: usize,
    #[arg(long = "step-size", visible_alias = "step_size", default_value_t = 1e-3)]
    pub step_size: f64,
    /// Multiple of the uniform density a cell needs to join a mode.
    #[arg(long, default_value_t = so3pdf::infer::DEFAULT_DENSITY_FLOOR)]
    pub floor: f64,
    /// Mode linking radius in radians (default: twice the median spacing).
    #[arg(long = "link-radius", visible_alias = "link_radius")]
    pub link_radius: Option<f64>,
    /// nearest: density of the nearest cell; exact: query the model at the annotation.
    #[arg(long = "ll-mode", visible_alias = "ll_mode", default_value = "nearest")]
    pub ll_mode: LlMode,
    /// Evaluate only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LlMode {
    Nearest,
    Exact,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON array of numbers, or a dataset line with a `d` field.
    #[arg(long)]
    pub descriptor: PathBuf,
    #[arg(long = "grid-level", visible_alias = "grid_level")]
    pub grid_level: u32,
    #[arg(long = "ascent-steps", visible_alias = "ascent_steps", default_value_t = 100)]
    pub ascent_steps: usize,
    #[arg(long = "step-size", visible_alias = "step_size", default_value_t = 1e-3)]
    pub step_size: f64,
    #[arg(long, default_value_t = so3pdf::infer::DEFAULT_DENSITY_FLOOR)]
    pub floor: f64,
    #[arg(long = "link-radius", visible_alias = "link_radius")]
    pub link_radius: Option<f64>,
    /// Write the distribution dump here.
    #[arg(long = "dist-out", visible_alias = "dist_out")]
    pub dist_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "z")]
    pub axis: String,
    /// Orbit file drawn as outlined circles.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub floor: f64,
    #[arg(long, default_value_t = 800)]
    pub width: u32,
    #[arg(long = "size-scale", visible_alias = "size_scale", default_value_t = 1.0)]
    pub size_scale: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated grid levels.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    pub levels: Vec<u32>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Timing CSV; printed to standard output when absent.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Returns the `--config` path given after the subcommand, if any.
fn find_config(argv: &[String]) -> Option<(usize, PathBuf)> {
    for (i, a) in argv.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            return Some((i, PathBuf::from(p)));
        }
        if a == "--config" {
            return argv.get(i + 1).map(|p| (i, PathBuf::from(p)));
        }
    }
    None
}

/// Index just past the subcommand path (`grid gen` counts as one path).
fn subcommand_end(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--threads" || a == "--log-level" {
            i += 2;
            continue;
        }
        if a.starts_with('-') {
            i += 1;
            continue;
        }
        return Some(if a == "grid" { i + 2 } else { i + 1 });
    }
    None
}

/// Splices `key = value` lines from the `--config` file in as `--key=value`
/// right after the subcommand, so flags given on the command line win.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, ConfigFileError> {
    let Some((_, path)) = find_config(&argv) else {
        return Ok(argv);
    };
    let Some(at) = subcommand_end(&argv) else {
        return Ok(argv);
    };
    let pairs = read_pairs(&path)?;
    let mut out = argv[..at.min(argv.len())].to_vec();
    for (k, v) in pairs {
        if k != "config" {
            out.push(format!("--{k}={v}"));
        }
    }
    out.extend_from_slice(&argv[at.min(argv.len())..]);
    Ok(out)
}

#[derive(Debug)]
pub struct ConfigFileError(pub String);

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, ConfigFileError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigFileError(format!("{}: {e}", path.display())))?;
    let map = so3pdf::train::parse_key_values(&text)
        .map_err(|e| ConfigFileError(format!("{}: {e}", path.display())))?;
    Ok(map.into_iter().collect())
}
