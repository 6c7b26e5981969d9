//! `dcd`: data generation, teacher training, distillation, evaluation,
//! separability traces, the (M, M') sweep, the ablation grid and gradient
//! checks.

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcd_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "dcd",
    version,
    about = "Contrastive distillation for cross-modal matching"
)]
struct Cli {
    /// Root for default output directories (`<root>/<command>`).
    #[arg(long, global = true, env = "DCD_OUTPUT_ROOT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value config file; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: <out-root>/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Synthetic benchmark settings.
#[derive(Args, Debug, Clone, Default)]
pub struct ManifestFlags {
    /// Captions per image [default: 5].
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    /// Image feature dimension [default: 64].
    #[arg(long)]
    pub image_dim: Option<usize>,
    /// Text feature dimension [default: 64].
    #[arg(long)]
    pub text_dim: Option<usize>,
    /// Shared latent dimension [default: 16].
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Feature noise standard deviation [default: 0.25].
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Training images [default: 2000].
    #[arg(long)]
    pub train_images: Option<usize>,
    /// Validation images [default: 200].
    #[arg(long)]
    pub val_images: Option<usize>,
    /// Test images [default: 200].
    #[arg(long)]
    pub test_images: Option<usize>,
    /// Generator seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training settings. Defaults depend on the role: the teacher uses a
/// 4x256 scorer for 30 epochs, students a 2x128 scorer for 40.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// finetune | vanilla_kd | dcd | ablation [student default: dcd].
    #[arg(long)]
    pub regime: Option<String>,
    /// Ablation flag: hard-negative selection and knowledge adjustment.
    #[arg(long)]
    pub ds_ka: Option<String>,
    /// Ablation flag: uncertainty weights on the task loss.
    #[arg(long)]
    pub hw: Option<String>,
    /// Ablation flag: reversed weights on the distillation loss.
    #[arg(long)]
    pub sw: Option<String>,
    /// Task/distillation blend [default: 0.5].
    #[arg(long)]
    pub alpha: Option<String>,
    /// Distillation temperature [default: 1].
    #[arg(long)]
    pub tau: Option<String>,
    /// Negatives scored by the teacher per query [default: 63].
    #[arg(long)]
    pub m: Option<String>,
    /// Negatives kept for the student per query [default: 7].
    #[arg(long)]
    pub m_prime: Option<String>,
    /// Queries per batch [default: 128].
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// Run seed; multi-seed commands use seed + run index [default: 0].
    #[arg(long)]
    pub seed: Option<String>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub beta1: Option<String>,
    #[arg(long)]
    pub beta2: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    /// Hidden widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    /// tanh | scaled_tanh [default: tanh].
    #[arg(long)]
    pub activation: Option<String>,
    /// Source of per-query uncertainty: teacher | student [default: teacher].
    #[arg(long)]
    pub uncertainty: Option<String>,
    /// Soft-label loss: mse | kl [default: mse].
    #[arg(long)]
    pub distill: Option<String>,
    /// Score the training split with the teacher once up front [default: true].
    #[arg(long)]
    pub teacher_cache: Option<String>,
}

impl TrainFlags {
    pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("regime", self.regime.clone()),
            ("ds_ka", self.ds_ka.clone()),
            ("hw", self.hw.clone()),
            ("sw", self.sw.clone()),
            ("alpha", self.alpha.clone()),
            ("tau", self.tau.clone()),
            ("m", self.m.clone()),
            ("m_prime", self.m_prime.clone()),
            ("batch_size", self.batch_size.clone()),
            ("epochs", self.epochs.clone()),
            ("seed", self.seed.clone()),
            ("lr", self.lr.clone()),
            ("beta1", self.beta1.clone()),
            ("beta2", self.beta2.clone()),
            ("eps", self.eps.clone()),
            ("hidden", self.hidden.clone()),
            ("activation", self.activation.clone()),
            ("uncertainty", self.uncertainty.clone()),
            ("distill", self.distill.clone()),
            ("teacher_cache", self.teacher_cache.clone()),
        ]
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        manifest: ManifestFlags,
    },
    /// Train the teacher scorer.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long, alias = "features")]
        data: Option<PathBuf>,
        /// Continue from the run's saved state.
        #[arg(long)]
        resume: bool,
        /// Keep a checkpoint of every epoch.
        #[arg(long)]
        keep_epochs: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a student against a frozen teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "features")]
        data: Option<PathBuf>,
        /// Teacher run or checkpoint directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        keep_epochs: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Retrieval recall of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "features")]
        data: Option<PathBuf>,
        /// Run or checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train | val | test [default: test].
        #[arg(long)]
        split: Option<String>,
    },
    /// Mean squashed positive and top negative scores per checkpoint.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "features")]
        data: Option<PathBuf>,
        /// Checkpoint directories, comma separated. A run directory stands
        /// for its per-epoch checkpoints.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Probe split [default: test].
        #[arg(long)]
        split: Option<String>,
    },
    /// Student runs over a grid of (M, M') settings.
    SweepMm {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "features")]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Settings as MxM', comma separated [default: 16x16,32x4,32x8,64x4,64x8,64x16].
        #[arg(long)]
        grid: Option<String>,
        /// Seeds per setting [default: 1].
        #[arg(long)]
        seeds: Option<usize>,
        /// Concurrent runs [default: 1].
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// The five-regime ablation ladder over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "features")]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Seeds per regime [default: 5].
        #[arg(long)]
        seeds: Option<usize>,
        /// Concurrent runs [default: 1].
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per check [default: 20].
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Largest accepted relative error [default: 1e-4].
        #[arg(long)]
        tolerance: Option<f64>,
        /// Test hook: perturb the analytic gradient of the named check.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::Format { .. } => EXIT_FORMAT,
        Error::Diverged(_) => EXIT_DIVERGED,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root;
    let result = match cli.command {
        Command::GenData { common, manifest } => commands::gen_data(&root, common, manifest),
        Command::TrainTeacher {
            common,
            data,
            resume,
            keep_epochs,
            train,
        } => commands::train_teacher(&root, common, data, resume, keep_epochs, train),
        Command::Distill {
            common,
            data,
            teacher,
            resume,
            keep_epochs,
            train,
        } => commands::distill(&root, common, data, teacher, resume, keep_epochs, train),
        Command::Evaluate {
            common,
            data,
            checkpoint,
            split,
        } => commands::evaluate(&root, common, data, checkpoint, split),
        Command::Trace {
            common,
            data,
            checkpoint,
            split,
        } => commands::trace(&root, common, data, checkpoint, split),
        Command::SweepMm {
            common,
            data,
            teacher,
            grid,
            seeds,
            jobs,
            train,
        } => commands::sweep_mm(&root, common, data, teacher, grid, seeds, jobs, train),
        Command::Ablate {
            common,
            data,
            teacher,
            seeds,
            jobs,
            train,
        } => commands::ablate(&root, common, data, teacher, seeds, jobs, train),
        Command::Gradcheck {
            common,
            instances,
            seed,
            tolerance,
            corrupt,
        } => commands::gradcheck(&root, common, instances, seed, tolerance, corrupt),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
