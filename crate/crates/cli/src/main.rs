mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use headfit_core::metrics::LandmarkSubset;
use headfit_core::FrameId;

/// Two-stage morphable head model fitting.
#[derive(Debug, Parser)]
#[command(name = "headfit", version)]
pub struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON project configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to cameras, keypoints and a dense reconstruction.
    Fit(FitArgs),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Run the regularization sweep on synthetic heads.
    Sweep(SweepArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Check input files without fitting.
    Validate(ValidateArgs),
    /// Build a synthetic model archive.
    ModelBuild(ModelBuildArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Directory with one keypoint JSON per frame.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    /// Dense reconstruction (.ply or .obj).
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Defaults to the frame with the most keypoints.
    #[arg(long)]
    pub frontal_frame: Option<FrameId>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scene specification JSON; defaults to the config's `synth` section.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated list of lambdas.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SubsetArg {
    All,
    NoJawline,
    JawlineOnly,
}

impl From<SubsetArg> for LandmarkSubset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::All => LandmarkSubset::All,
            SubsetArg::NoJawline => LandmarkSubset::NoJawline,
            SubsetArg::JawlineOnly => LandmarkSubset::JawlineOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Scalp Chamfer distance of a fitted mesh to a reference reconstruction.
    Chamfer {
        #[arg(long)]
        model: PathBuf,
        /// Fitted mesh in scene coordinates.
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = headfit_core::metrics::REFERENCE_HEAD_WIDTH_MM)]
        head_width_mm: f64,
        #[arg(long)]
        symmetric: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RMS landmark reprojection error over a set of frames.
    Rms {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        keypoints: PathBuf,
        /// Frames to evaluate; defaults to the held-out frames of `--result`.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<FrameId>>,
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SubsetArg::All)]
        subset: SubsetArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Height/width and height/length ratios from a portrait and a lateral view.
    Ratios {
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        portrait: FrameId,
        #[arg(long)]
        lateral: FrameId,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean vertex displacement between two fits of the same head.
    Consistency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct ModelBuildArgs {
    /// Model specification JSON; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub subdivisions: Option<u32>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub aux_landmarks: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HEADFIT_LOG", "warn")).init();
    // Usage errors exit with 1; clap's own default (2) is reserved for unfittable scenes.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
