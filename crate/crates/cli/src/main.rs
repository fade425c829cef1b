//! `unif`: generate synthetic scans, train, extract meshes and evaluate them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unif_core::deform::QRatio;
use unif_core::neural_sdf::UnionMode;

/// Problem with the user's input rather than with the program.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser, Debug)]
#[command(name = "unif", version, about = "Articulated shape reconstruction with a union of part-wise neural SDFs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic capsule-body scan sequence to a dataset directory.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Extract the union mesh (and optionally per-part meshes) at one pose.
    Reconstruct(ReconstructArgs),
    /// Extract one union mesh per pose of a sequence.
    Animate(AnimateArgs),
    /// Compare meshes with ground-truth scans (p2s, Chamfer, recall, precision, F-score).
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Skeleton preset (single, arm2, arm3, star) or a skeleton JSON file.
    #[arg(long, default_value = "arm2")]
    pub skeleton: String,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// static | sweep:<joint>:<from deg>:<to deg> | walk:<step deg>
    #[arg(long, default_value = "sweep:elbow:0:90")]
    pub schedule: String,
    /// Scan points per frame.
    #[arg(long, default_value_t = 5000)]
    pub points: usize,
    /// Capsule radius in metres, shared by all bones.
    #[arg(long, default_value_t = 0.045)]
    pub radius: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QRatioArg {
    BoneOverNeighbor,
    NeighborOverBone,
}

impl From<QRatioArg> for QRatio {
    fn from(q: QRatioArg) -> Self {
        match q {
            QRatioArg::BoneOverNeighbor => QRatio::BoneOverNeighbor,
            QRatioArg::NeighborOverBone => QRatio::NeighborOverBone,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UnionArg {
    Min,
    Smooth,
}

impl From<UnionArg> for UnionMode {
    fn from(u: UnionArg) -> Self {
        match u {
            UnionArg::Min => UnionMode::Min,
            UnionArg::Smooth => UnionMode::Smooth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for model.json, log.csv and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with any of the options below (kebab-case keys); flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Epochs [default: 5000]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate factor applied at each decay epoch [default: 0.3]
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Decay epochs, comma separated [default: 1000,2000,3000]
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    /// Frames per optimisation step [default: 4]
    #[arg(long)]
    pub frames_per_batch: Option<usize>,
    /// Seed for initialisation and sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Surface samples per frame and step [default: 5000]
    #[arg(long)]
    pub surface_samples: Option<usize>,
    /// Near-surface samples per frame and step [default: 5000]
    #[arg(long)]
    pub local_samples: Option<usize>,
    /// Bounding-box samples per frame and step [default: 5000]
    #[arg(long)]
    pub global_samples: Option<usize>,
    /// Standard deviation of the near-surface noise in metres [default: 0.1]
    #[arg(long)]
    pub sigma_local: Option<f64>,
    /// Enlargement of the scan bounding box for global samples [default: 1.5]
    #[arg(long)]
    pub box_scale: Option<f64>,
    /// Unit-gradient weight [default: 0.1]
    #[arg(long)]
    pub unit_weight: Option<f64>,
    /// Bone-limit weight [default: 1]
    #[arg(long)]
    pub lim_weight: Option<f64>,
    /// Section-normal weight [default: 0.01]
    #[arg(long)]
    pub sec_weight: Option<f64>,
    /// Minimal-perimeter weight [default: 0.001]
    #[arg(long)]
    pub perim_weight: Option<f64>,
    /// Write a checkpoint every K epochs (0 disables) [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Frames to train on [default: train]
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Sphere refit steps during initialisation [default: 300]
    #[arg(long)]
    pub init_steps: Option<usize>,
    /// Disable adjacent part seaming.
    #[arg(long)]
    pub no_aps: bool,
    /// Disable the bone-limit loss.
    #[arg(long)]
    pub no_lim: bool,
    /// Disable the section-normal loss.
    #[arg(long)]
    pub no_sec: bool,
    /// Disable the minimal-perimeter loss.
    #[arg(long)]
    pub no_perim: bool,
    /// Orientation of the seam split ratio [default: bone-over-neighbor]
    #[arg(long, value_enum)]
    pub q_ratio: Option<QRatioArg>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Trained model (model.json or a checkpoint's model file).
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file providing resolution, union and pad; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid cells per axis [default: 64]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Union used for extraction [default: min]
    #[arg(long, value_enum)]
    pub union: Option<UnionArg>,
    /// Padding around the posed skeleton in metres [default: 0.1]
    #[arg(long)]
    pub pad: Option<f64>,
    /// Mesh format of the union mesh.
    #[arg(long, value_enum, default_value = "obj")]
    pub format: FormatArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Obj,
    Ply,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub extract: ExtractArgs,
    /// Pose JSON file (a list of per-bone motions, as in `frames/NNNN.pose.json`); rest pose if omitted.
    #[arg(long, conflicts_with = "frame")]
    pub pose: Option<PathBuf>,
    /// Use the pose of this frame of `--data`.
    #[arg(long, requires = "data")]
    pub frame: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write part_<n>.ply per part with a part_id vertex property.
    #[arg(long)]
    pub parts: bool,
}

#[derive(Args, Debug)]
pub struct AnimateArgs {
    #[command(flatten)]
    pub extract: ExtractArgs,
    /// JSON file with a list of poses; meshes are numbered by list position.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    pub poses: Option<PathBuf>,
    /// Use every frame pose of this dataset; meshes are numbered by frame.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory; pairs `<meshes>/NNNN.obj|ply` with frame NNNN.
    #[arg(long, requires = "meshes", conflicts_with_all = ["scan", "mesh"])]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub meshes: Option<PathBuf>,
    /// Single ground-truth scan (frame PLY).
    #[arg(long, requires = "mesh")]
    pub scan: Option<PathBuf>,
    #[arg(long, requires = "scan")]
    pub mesh: Option<PathBuf>,
    /// Distance threshold for recall and precision in millimetres.
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
    /// Points sampled from each mesh.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV rows to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// 1 for bad input, 2 for failures inside the program.
fn exit_code(err: &anyhow::Error) -> u8 {
    use unif_core::Error as E;
    if err.downcast_ref::<UserError>().is_some() || err.downcast_ref::<std::io::Error>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(E::Diverged { .. } | E::NonFinite(_) | E::NonFiniteLoss(_)) | None => 2,
        Some(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
        Command::Animate(a) => commands::animate(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
