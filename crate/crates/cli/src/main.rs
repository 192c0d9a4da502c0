//! `nemto`: dataset generation, training, rendering, relighting, mesh
//! extraction and evaluation.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "nemto", version, about = "Neural environment matting of transparent objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render an analytic dielectric object into a training dataset.
    Generate(GenerateArgs),
    /// Optimize geometry and the ray-bending network on a dataset.
    Train(TrainArgs),
    /// Render dataset views with a trained model.
    Render(RenderArgs),
    /// Render dataset views with a trained model under a new environment map.
    Relight(RelightArgs),
    /// Extract the learned (or analytic) surface as an OBJ mesh.
    ExtractMesh(ExtractMeshArgs),
    /// Compare rendered views against references, or two meshes.
    Eval(EvalArgs),
    /// Write a built-in environment map to a PFM file.
    MakeEnv(MakeEnvArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// `sphere`, `box`, `torus` or `csg:<file>` (JSON or TOML shape description).
    #[arg(long, default_value = "sphere")]
    pub shape: String,
    #[arg(long, default_value_t = 1.4723)]
    pub ior: f64,
    /// Environment map (PFM, or PNG decoded from sRGB).
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub views: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    pub res: usize,
    #[arg(long, default_value_t = 40.0)]
    pub fov: f64,
    /// Camera distance from the object centre.
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    /// Interface cap for the transmitted path.
    #[arg(long, default_value_t = 8)]
    pub b_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML training configuration; defaults are used for absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep the dataset's analytic shape and train only the ray-bending network.
    #[arg(long)]
    pub freeze_geometry: bool,
    /// Overrides `iterations` from the configuration.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

/// Pixel rectangle `x,y,width,height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

fn parse_crop(s: &str) -> Result<Crop, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] if width > 0 && height > 0 => Ok(Crop { x, y, width, height }),
        _ => Err("expected x,y,width,height with positive width and height".into()),
    }
}

#[derive(Args, Debug)]
pub struct ViewSelection {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset providing the cameras.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Render only this pixel rectangle of each view.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<Crop>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub views: ViewSelection,
}

#[derive(Args, Debug)]
pub struct RelightArgs {
    /// Replacement environment map (PFM or PNG).
    #[arg(long)]
    pub env: PathBuf,
    #[command(flatten)]
    pub views: ViewSelection,
}

#[derive(Args, Debug)]
pub struct ExtractMeshArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grid cells per axis, 16 to 512.
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory with `images/view_NNNN.pfm` (and optionally `masks/`).
    #[arg(long, requires = "reference")]
    pub pred: Option<PathBuf>,
    /// Reference directory in the same layout, e.g. a dataset.
    #[arg(long = "ref", requires = "pred")]
    pub reference: Option<PathBuf>,
    /// Restrict image metrics to the reference object mask.
    #[arg(long)]
    pub masked: bool,
    /// Compare linear values instead of tone-mapped ones.
    #[arg(long)]
    pub linear: bool,
    /// Predicted mesh for Chamfer distance.
    #[arg(long, requires = "ref_mesh")]
    pub mesh: Option<PathBuf>,
    /// Reference mesh for Chamfer distance.
    #[arg(long, requires = "mesh")]
    pub ref_mesh: Option<PathBuf>,
    /// Surface samples per mesh.
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EnvPreset {
    Sky,
    Studio,
    Checker,
    Gradient,
    Constant,
}

#[derive(Args, Debug)]
pub struct MakeEnvArgs {
    #[arg(long, value_enum, default_value = "sky")]
    pub preset: EnvPreset,
    /// Radiance of the constant preset, `r,g,b` or a single value.
    #[arg(long, default_value = "0.5")]
    pub value: String,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NEMTO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("NEMTO_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a.views, None),
        Command::Relight(a) => commands::render(&a.views, Some(&a.env)),
        Command::ExtractMesh(a) => commands::extract_mesh(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::MakeEnv(a) => commands::make_env(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
