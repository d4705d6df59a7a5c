//! `hanerf`: synthesize datasets, train, evaluate and render.

mod commands;
mod exit;
mod pose;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hanerf_core::trainer::Mode;

#[derive(Parser)]
#[command(
    name = "hanerf",
    version,
    about = "Appearance-hallucinating, occlusion-robust radiance fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset with perturbed training images.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Render every test view of a dataset and score it.
    Eval(EvalArgs),
    /// Render one view.
    Render(RenderArgs),
    /// Render several views with the appearance of an example image.
    Transfer(TransferArgs),
    /// Render one view along a blend between two appearances.
    Interpolate(InterpolateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Perturbation {
    Color,
    Occlusion,
    Combined,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
    /// Seed for poses, color perturbations and occluders [default: scene seed]
    #[arg(long)]
    pub perturb_seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub n_train: usize,
    #[arg(long, default_value_t = 8)]
    pub n_test: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    /// Fixed occluder coverage per training image [default: uniform in 0.10..0.30]
    #[arg(long)]
    pub coverage: Option<f64>,
    #[arg(long, value_enum, default_value_t = Perturbation::Combined)]
    pub perturb: Perturbation,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_o: Option<f64>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint up to the configured iteration count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Camera used when no dataset supplies one.
#[derive(Args)]
pub struct CameraArgs {
    /// Dataset directory or manifest; supplies the camera and frame ids.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    /// Horizontal field of view in degrees.
    #[arg(long, default_value_t = 40.0)]
    pub fov: f64,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// 16 row-major camera-to-world reals, or a frame id from --dataset.
    #[arg(long, allow_hyphen_values = true)]
    pub pose: String,
    /// Image whose appearance conditions the render [default: zero appearance]
    #[arg(long)]
    pub appearance_image: Option<PathBuf>,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub example: PathBuf,
    /// One or more poses, each 16 reals or a frame id. A pose starting with a
    /// minus sign needs the `--poses=<pose>` form.
    #[arg(long, num_args = 1.., required = true)]
    pub poses: Vec<String>,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image giving the appearance at the first step.
    #[arg(long)]
    pub a: PathBuf,
    /// Image giving the appearance at the last step.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub pose: String,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: hanerf_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::BAD_INPUT
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Render(a) => commands::render(&a),
        Command::Transfer(a) => commands::transfer(&a),
        Command::Interpolate(a) => commands::interpolate(&a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
