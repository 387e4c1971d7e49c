//! `facegeom` command line: argument parsing, dispatch and exit codes.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod logging;
pub mod manifest;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bundle::Method;

/// Bad invocation or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for an error: 1 usage, 3 numerical failure, 2 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<facegeom_core::Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(
    name = "facegeom",
    version,
    about = "Face geometry images and synthetic face pipeline"
)]
pub struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Pipeline configuration (TOML or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a template mesh onto a scan.
    Align(AlignArgs),
    /// Map a disk-topology mesh onto the unit square.
    Parametrize(ParametrizeArgs),
    /// Rasterize per-vertex colors or positions into an image.
    Rasterize(RasterizeArgs),
    /// Build PCA models or a full model directory.
    BuildModel(BuildModelArgs),
    /// Estimate a geometry for a texture.
    FitGeometry(FitGeometryArgs),
    /// Per-sample geometry errors of one or all estimators.
    EvalFit(EvalFitArgs),
    /// Apply expression coefficients to a neutral mesh.
    Expression(ExpressionArgs),
    /// Assemble masked real/fake batches.
    PrepMasked(PrepMaskedArgs),
    /// Generate the colored-shapes dataset with red-circle corruptions.
    SynthShapes(SynthShapesArgs),
    /// Sliced Wasserstein distance between two image sets.
    EvalSwd(EvalSwdArgs),
    /// Nearest-neighbor distances between descriptor sets.
    EvalNn(EvalNnArgs),
    /// Build a training dataset from landmarked scans.
    Prepare(PrepareArgs),
    /// Produce a textured synthetic face.
    SynthFace(SynthFaceArgs),
    /// Write a synthetic scan population for demos and tests.
    SynthPopulation(SynthPopulationArgs),
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub scan: PathBuf,
    /// `[[template_vertex, scan_vertex], ...]`; defaults to landmark sidecars.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Energy trace and transform as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParametrizeArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// JSON array of positive per-vertex design weights.
    #[arg(long)]
    pub vertex_weights: Option<PathBuf>,
    /// JSON array of `[a, b]` mirror pairs.
    #[arg(long)]
    pub symmetry: Option<PathBuf>,
    #[arg(long)]
    pub anchor: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RasterKind {
    Texture,
    Geometry,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub width: usize,
    #[arg(long, value_enum, default_value_t = RasterKind::Geometry)]
    pub kind: RasterKind,
    /// `.png` for textures, `.gim` for geometry.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the augmented variants (2 textures or 8 geometries).
    #[arg(long)]
    pub augment: bool,
    /// X mirror constant `c` in `x -> c - x`; defaults to min.x + max.x.
    #[arg(long)]
    pub mirror_c: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub bit_depth: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Texture,
    Geometry,
    Joint,
    Expression,
    /// Template, map, all PCA models and estimator parameters.
    Bundle,
}

#[derive(Debug, Args)]
pub struct BuildModelArgs {
    /// Directory of colored OBJ meshes sharing one connectivity. For
    /// `expression`, a directory with `neutral/` and `scans/` subdirectories.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ModelKind,
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
    /// Template for `bundle` (defaults to the config's template).
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Model file, or directory for `bundle`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitGeometryArgs {
    #[arg(long, value_enum, default_value_t = Method::Ls)]
    pub method: Method,
    /// Texture PNG in the template's uv layout, or colored OBJ.
    #[arg(long)]
    pub texture: PathBuf,
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMethod {
    Random,
    Nn,
    Ml,
    Ls,
    All,
}

#[derive(Debug, Args)]
pub struct EvalFitArgs {
    #[arg(long, value_enum, default_value_t = EvalMethod::All)]
    pub method: EvalMethod,
    /// Colored test meshes on the template connectivity.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub models: PathBuf,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExpressionArgs {
    #[arg(long)]
    pub neutral: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// JSON array of coefficients; zeros when omitted.
    #[arg(long)]
    pub coeffs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepMaskedArgs {
    /// Real RGB images (PNG).
    #[arg(long)]
    pub images: PathBuf,
    /// Masks with the same file names (PNG, nonzero = valid).
    #[arg(long)]
    pub masks: PathBuf,
    /// Generated images with the same file names; defaults to the real ones.
    #[arg(long)]
    pub fake: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthShapesArgs {
    #[arg(short = 'n', long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Full-size dataset: 10,000 images of 256 x 256.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalSwdArgs {
    #[arg(long)]
    pub set_a: PathBuf,
    #[arg(long)]
    pub set_b: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub levels: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalNnArgs {
    /// Descriptor CSV (`id,d0,...`).
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub scans: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Skip the flip and mirror augmentations.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct SynthFaceArgs {
    #[arg(long)]
    pub models: PathBuf,
    /// Generated texture (PNG or colored OBJ); sampled from the texture model when omitted.
    #[arg(long)]
    pub texture: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Ls)]
    pub method: Method,
    #[arg(long)]
    pub expression_model: Option<PathBuf>,
    #[arg(long)]
    pub expression_coeffs: Option<PathBuf>,
    /// Apply the expression model with zero coefficients.
    #[arg(long)]
    pub expression_zero: bool,
    /// Sample expression coefficients from the model prior.
    #[arg(long)]
    pub random_expression: bool,
    #[arg(long, default_value_t = 0)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthPopulationArgs {
    #[arg(short = 'n', long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 40)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub texture_noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    logging::init(cli.quiet);
    match commands::run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e:#}");
            exit_code(&e)
        }
    }
}
