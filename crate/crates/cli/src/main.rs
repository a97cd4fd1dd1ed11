mod artifacts;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coupling_core::config::{RelaxationMode, ScheduleKind};
use coupling_core::oracle::OracleSuite;
use coupling_core::CouplingError;

/// Train, sample, guide and evaluate sequence-to-Gaussian coupling models.
///
/// Exit codes: 0 success, 2 config error, 3 missing prerequisite,
/// 4 oracle or acceptance failure, 1 anything else.
#[derive(Debug, Parser)]
#[command(name = "coupling", version)]
struct Cli {
    /// Directory holding the MNIST IDX archives.
    #[arg(long, global = true, env = "COUPLING_DATA_DIR")]
    data_dir: Option<PathBuf>,

    /// Deterministic mode: manifests omit wall-clock timings so that repeated
    /// runs produce identical files. Computation is always seeded.
    #[arg(long, global = true, env = "COUPLING_DETERMINISTIC", value_parser = clap::builder::FalseyValueParser::new())]
    deterministic: bool,

    /// Floating point precision of the models.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train stage A, stage B or the masked denoiser. Re-running resumes from
    /// the last saved epoch.
    Train(TrainArgs),
    /// Draw samples from a stage B or denoiser checkpoint.
    Sample(SampleArgs),
    /// Guided sampling or reward fine-tuning from a stage B checkpoint.
    Guide(GuideArgs),
    /// Compute metrics on a sample dump.
    Eval(EvalArgs),
    /// Run randomized checks against exact divergences.
    Oracle(OracleArgs),
    /// Summarize run directories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    A,
    B,
    Mdm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: Stage,
    /// Config file, or the name of a built-in profile.
    #[arg(long)]
    pub config: String,
    /// Run directory for checkpoints, logs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage A checkpoint; defaults to `stage_a.ckpt` in the run directory.
    #[arg(long)]
    pub stage_a: Option<PathBuf>,
    /// With `mdm`: train the plain denoiser without latents.
    #[arg(long)]
    pub baseline: bool,
    /// Train at most this many epochs in this invocation and leave the run
    /// resumable, for time-boxed jobs.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    OneStep,
    P2self,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Linear,
    Cosine,
}

impl From<Schedule> for ScheduleKind {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Linear => ScheduleKind::Linear,
            Schedule::Cosine => ScheduleKind::Cosine,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SampleMode::OneStep)]
    pub mode: SampleMode,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling seed; defaults to the checkpoint config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// One-step sampling temperature.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Prior scale; defaults to the config value.
    #[arg(long)]
    pub z_scale: Option<f64>,
    /// Class label for a conditional generator; labels cycle through all
    /// classes when absent.
    #[arg(long)]
    pub label: Option<usize>,
    /// P2-self steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub schedule: Option<Schedule>,
    /// Comma-separated per-step temperatures, or a single value.
    #[arg(long, value_delimiter = ',')]
    pub temps: Option<Vec<f64>>,
    #[arg(long)]
    pub remask_strength: Option<f64>,
    /// Samples per forward batch.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GuideMode {
    Cfg,
    Latent,
    RewardFt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Relax {
    Soft,
    Gumbel,
}

impl From<Relax> for RelaxationMode {
    fn from(r: Relax) -> Self {
        match r {
            Relax::Soft => RelaxationMode::Soft,
            Relax::Gumbel => RelaxationMode::Gumbel,
        }
    }
}

#[derive(Debug, Args)]
pub struct GuideArgs {
    /// Stage B checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: GuideMode,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Guidance scale for `cfg`.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Ascent steps for `latent`, optimizer steps for `reward-ft`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Latent step size for `latent`, learning rate for `reward-ft`.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_enum)]
    pub relax: Option<Relax>,
    #[arg(long)]
    pub relax_temperature: Option<f64>,
    /// Reward: `classifier` (fit on the labelled training set) or
    /// `token=<v>` (expected count of token v).
    #[arg(long)]
    pub reward: Option<String>,
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sample dump file or a directory containing `samples.cmsd`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Reference dump for FID.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Comma-separated subset of entropy, fid, tv, gaussianity.
    #[arg(long, value_delimiter = ',', default_value = "entropy")]
    pub metrics: Vec<String>,
    /// Stage B checkpoint for oracle TV, stage A checkpoint for gaussianity.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Config file or profile; defaults to the checkpoint's config.
    #[arg(long)]
    pub config: Option<String>,
    /// Report file; defaults to `metrics.jsonl` next to the samples.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Barrier,
    Bound,
    Pinsker,
}

impl From<Suite> for OracleSuite {
    fn from(s: Suite) -> Self {
        match s {
            Suite::All => OracleSuite::All,
            Suite::Barrier => OracleSuite::Barrier,
            Suite::Bound => OracleSuite::Bound,
            Suite::Pinsker => OracleSuite::Pinsker,
        }
    }
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per randomized check.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Also write the records to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing a `manifest.json`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

/// Global settings shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Context {
    pub data_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub precision: Precision,
}

/// A check ran and failed.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 4;
    }
    match err.downcast_ref::<CouplingError>() {
        Some(CouplingError::Config { .. }) => 2,
        Some(CouplingError::Prerequisite(_) | CouplingError::NotFrozen(_) | CouplingError::Checksum { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Context {
        data_dir: cli.data_dir,
        deterministic: cli.deterministic,
        precision: cli.precision,
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a, &ctx),
        Command::Sample(a) => commands::sample(&a, &ctx),
        Command::Guide(a) => commands::guide(&a, &ctx),
        Command::Eval(a) => commands::eval(&a, &ctx),
        Command::Oracle(a) => commands::oracle(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
