//! Batch command-line surface: building a shape model, encoding and decoding
//! deformations, fitting landmarks, generating synthetic data and scoring
//! predictions.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input (including missing
//! input files and problems the solvers reject).

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub mod commands;
pub mod config;

pub use commands::{
    cmd_build_model, cmd_decode, cmd_demo_data, cmd_encode, cmd_eval, cmd_fit, cmd_synth, Outcome,
};
pub use config::{FileConfig, Overrides, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<carimorph::Error> for CliError {
    fn from(e: carimorph::Error) -> Self {
        match e {
            carimorph::Error::Io { .. } => Self::io(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "carimorph", version, about = "Nonlinear 3D caricature face model tools")]
pub struct Cli {
    /// TOML settings file. Flags and CARIMORPH_* variables override it.
    #[arg(long, global = true, env = "CARIMORPH_CONFIG")]
    pub config: Option<PathBuf>,

    /// Print a machine-readable JSON summary on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a target mesh against the template as a deformation file.
    Encode(EncodeArgs),
    /// Reconstruct a mesh from a deformation file.
    Decode(DecodeArgs),
    /// Build a shape model from exemplar meshes.
    BuildModel(BuildModelArgs),
    /// Fit the model to 68 image landmarks (one file or a directory of them).
    Fit(FitArgs),
    /// Sample meshes, poses and landmarks from a model.
    Synth(SynthArgs),
    /// Score predicted landmarks (and meshes) against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic template, landmark mapping and exemplar meshes.
    DemoData(DemoDataArgs),
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Template mesh (OBJ).
    #[arg(long)]
    pub template: PathBuf,
    /// Deformed mesh with the template's vertex order (OBJ).
    #[arg(long)]
    pub target: PathBuf,
    /// Output deformation file; JSON when the extension is .json, binary otherwise.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Template mesh (OBJ).
    #[arg(long)]
    pub template: PathBuf,
    /// Deformation file written by `encode`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output mesh (OBJ).
    #[arg(long)]
    pub out: PathBuf,
    /// Centroid of the result as "x,y,z"; defaults to the template centroid.
    #[arg(long, allow_hyphen_values = true)]
    pub anchor: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildModelArgs {
    /// Template mesh (OBJ).
    #[arg(long)]
    pub template: PathBuf,
    /// Directory of exemplar meshes (.obj) or deformation files (.dr, .json).
    #[arg(long)]
    pub exemplars: PathBuf,
    /// Landmark mapping (JSON).
    #[arg(long)]
    pub mapping: PathBuf,
    /// Principal components to keep; clamped to n − 1 [default: 500].
    #[arg(short = 'm', long, env = "CARIMORPH_COMPONENTS")]
    pub components: Option<usize>,
    /// Output model container.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default, Clone)]
pub struct FitOptions {
    /// Weight of the landmark term [default: 0.01].
    #[arg(long, env = "CARIMORPH_ALPHA1")]
    pub alpha1: Option<f64>,
    /// Weight of the Laplacian term [default: 1].
    #[arg(long, env = "CARIMORPH_ALPHA2")]
    pub alpha2: Option<f64>,
    /// Maximum outer iterations [default: 50].
    #[arg(long, env = "CARIMORPH_MAX_ITERS")]
    pub max_iters: Option<usize>,
    /// Stop once an iteration lowers the energy by less than this fraction [default: 1e-6].
    #[arg(long, env = "CARIMORPH_TOLERANCE")]
    pub tolerance: Option<f64>,
    /// Re-select silhouette vertices during the fit (true/false) [default: true].
    #[arg(long, env = "CARIMORPH_SILHOUETTE_UPDATE")]
    pub silhouette_update: Option<bool>,
    /// Worker threads for directory input [default: available cores].
    #[arg(long, env = "CARIMORPH_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Shape model container.
    #[arg(long)]
    pub model: PathBuf,
    /// Landmark file (68 lines "x y"), or a directory of *.txt landmark files.
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Fitted mesh (OBJ); single-file mode.
    #[arg(long, required_unless_present = "out_dir")]
    pub out: Option<PathBuf>,
    /// Fitted pose (JSON); single-file mode.
    #[arg(long)]
    pub pose_out: Option<PathBuf>,
    /// Energy trace (CSV); single-file mode.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Reprojected landmarks of the fit; single-file mode.
    #[arg(long)]
    pub landmarks_out: Option<PathBuf>,
    /// Output directory for directory input: NAME.obj, NAME.json, NAME.csv, NAME.txt.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub options: FitOptions,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Shape model container.
    #[arg(long)]
    pub model: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub count: usize,
    /// Random seed [default: 0].
    #[arg(long, env = "CARIMORPH_SEED")]
    pub seed: Option<u64>,
    /// Output directory: sample_NNNN.obj, .txt (landmarks), .json (pose).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted NAME.txt landmark files (and optional NAME.obj).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth NAME.txt landmark files (and optional NAME.obj).
    #[arg(long)]
    pub gt: PathBuf,
    /// Output error report (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Output CED curve of the mean error in pixels (CSV).
    #[arg(long)]
    pub ced: PathBuf,
    /// Largest CED threshold in pixels.
    #[arg(long, default_value_t = 10.0)]
    pub ced_max: f64,
    /// Number of CED thresholds.
    #[arg(long, default_value_t = 101)]
    pub ced_steps: usize,
}

#[derive(Debug, Args)]
pub struct DemoDataArgs {
    /// Output directory: template.obj, mapping.json, exemplars/.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Grid columns (azimuth samples).
    #[arg(long, default_value_t = 48)]
    pub cols: usize,
    /// Grid rows.
    #[arg(long, default_value_t = 36)]
    pub rows: usize,
    /// Number of exemplar meshes.
    #[arg(long, default_value_t = 10)]
    pub exemplars: usize,
    /// Random seed [default: 0].
    #[arg(long, env = "CARIMORPH_SEED")]
    pub seed: Option<u64>,
}

impl FitOptions {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            silhouette_update: self.silhouette_update,
            workers: self.workers,
            ..Overrides::default()
        }
    }
}

/// Runs one parsed invocation and returns its summary.
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Encode(a) => cmd_encode(&a.template, &a.target, &a.out),
        Command::Decode(a) => {
            let anchor = a.anchor.as_deref().map(parse_anchor).transpose()?;
            cmd_decode(&a.template, &a.input, &a.out, anchor)
        }
        Command::BuildModel(a) => {
            let over = Overrides {
                components: a.components,
                ..Overrides::default()
            };
            let cfg = RunConfig::resolve(&over, &file)?;
            cmd_build_model(&a.template, &a.exemplars, &a.mapping, cfg.components, &a.out)
        }
        Command::Fit(a) => {
            let cfg = RunConfig::resolve(&a.options.overrides(), &file)?;
            cmd_fit(a, &cfg)
        }
        Command::Synth(a) => {
            let over = Overrides {
                seed: a.seed,
                ..Overrides::default()
            };
            let cfg = RunConfig::resolve(&over, &file)?;
            cmd_synth(&a.model, a.count, cfg.seed, &a.out_dir)
        }
        Command::Eval(a) => cmd_eval(&a.pred, &a.gt, &a.report, &a.ced, a.ced_max, a.ced_steps),
        Command::DemoData(a) => {
            let over = Overrides {
                seed: a.seed,
                ..Overrides::default()
            };
            let cfg = RunConfig::resolve(&over, &file)?;
            cmd_demo_data(&a.out_dir, a.cols, a.rows, a.exemplars, cfg.seed)
        }
    }
}

/// Parses, runs and prints; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                println!("{}", out.text.trim_end());
            }
            0
        }
        Err(e) => {
            if cli.json {
                println!("{}", serde_json::json!({ "error": e.message, "exit_code": e.code }));
            }
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn parse_anchor(s: &str) -> Result<carimorph::Vec3, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::validation(format!("anchor must be x,y,z, got {s:?}")))?;
    match parts.as_slice() {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(carimorph::Vec3::new(*x, *y, *z)),
        _ => Err(CliError::validation(format!("anchor must be three finite numbers, got {s:?}"))),
    }
}

/// Shorthand used by the commands to build their JSON summaries.
pub(crate) fn summary(command: &str, fields: Value) -> Value {
    let mut v = serde_json::json!({ "command": command });
    if let (Some(obj), Value::Object(extra)) = (v.as_object_mut(), fields) {
        obj.extend(extra);
    }
    v
}
