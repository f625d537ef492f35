use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flam_core::federation::{ENV_COORDINATOR_ADDR, ENV_PHASE_TIMEOUT_MS, ENV_REGISTRATION_TIMEOUT_MS};
use flam_core::synthetic::KernelFamily;
use flam_core::{MetricSpec, SkewKind, Task, WeightScheme};

#[derive(Debug, Parser)]
#[command(name = "flam", version, about = "Federated evaluation with aggregatable measures")]
pub struct Cli {
    /// TOML file whose sections mirror the subcommands and whose keys mirror
    /// their flags. Flags and environment variables take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a label pool across participants.
    Partition(PartitionArgs),
    /// Write a synthetic prediction file.
    Generate(GenerateArgs),
    /// Compare centralized, weighted-average and FLAM evaluation.
    Evaluate(EvaluateArgs),
    /// Evaluate a grid of alphas and seeds into one tidy table.
    Sweep(SweepArgs),
    /// Run a coordinator or participant process.
    #[command(subcommand)]
    Serve(ServeCommand),
}

#[derive(Debug, Subcommand)]
pub enum ServeCommand {
    Coordinator(CoordinatorArgs),
    Participant(ParticipantArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Iid,
    Qs,
    Ls,
    Lqs,
    Ms,
}

impl From<KindArg> for SkewKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Iid => SkewKind::Iid,
            KindArg::Qs => SkewKind::Qs,
            KindArg::Ls => SkewKind::Ls,
            KindArg::Lqs => SkewKind::Lqs,
            KindArg::Ms => SkewKind::Ms,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SkewArgs {
    #[arg(long, value_enum, default_value = "iid")]
    pub kind: KindArg,
    /// Dirichlet concentration over class proportions (ls, lqs).
    #[arg(long)]
    pub alpha_label: Option<f64>,
    /// Dirichlet concentration over partition sizes (qs, lqs).
    #[arg(long)]
    pub alpha_quantity: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub participants: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes every participant holds under manual skew.
    #[arg(long, value_delimiter = ',')]
    pub shared_classes: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Pool size of a synthetic federation.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// Kernel accuracy of participant 0.
    #[arg(long, default_value_t = 0.85)]
    pub accuracy: f64,
    /// Accuracy drop from the first to the last participant.
    #[arg(long, default_value_t = 0.3)]
    pub accuracy_spread: f64,
    #[arg(long, value_parser = parse_kernel, default_value = "symmetric")]
    pub kernel: KernelFamily,
    /// Regression: target offset between consecutive participants.
    #[arg(long, default_value_t = 1.0)]
    pub station_shift: f64,
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    #[arg(long, default_value_t = 0.2)]
    pub bias_spread: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Args)]
pub struct MetricArgs {
    /// Comma-separated metric names; defaults to every metric of the task.
    #[arg(long, value_delimiter = ',', value_parser = parse_metric)]
    pub metrics: Vec<MetricSpec>,
    /// Value a per-class 0/0 ratio takes.
    #[arg(long, default_value_t = 0.0)]
    pub zero_division: f64,
    #[arg(long = "schemes", alias = "scheme", value_delimiter = ',', value_parser = parse_scheme)]
    pub schemes: Vec<WeightScheme>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub skew: SkewArgs,
    /// CSV with a `label` column.
    #[arg(long)]
    pub labels: PathBuf,
    /// Needed by manual skew when the largest class is absent from the pool.
    #[arg(long)]
    pub class_count: Option<usize>,
    /// Plan CSV; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_task, default_value = "classification")]
    pub task: Task,
    #[arg(long, default_value_t = 10)]
    pub class_count: usize,
    #[command(flatten)]
    pub skew: SkewArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Prediction CSV; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Every mode side by side with deviations.
    Report,
    Centralized,
    WeightedAverage,
    Flam,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    /// Prediction CSV with `participant_id,y_true,y_pred` rows.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate the federation from the skew and model flags instead.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, value_parser = parse_task, default_value = "classification")]
    pub task: Task,
    /// Inferred from the largest label in the input when omitted.
    #[arg(long)]
    pub class_count: Option<usize>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, value_enum, default_value = "report")]
    pub mode: ModeArg,
    #[command(flatten)]
    pub skew: SkewArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// CSV output; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON mirror of the CSV output.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[arg(long, value_parser = parse_task, default_value = "classification")]
    pub task: Task,
    #[arg(long, default_value_t = 10)]
    pub class_count: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub alphas: Vec<f64>,
    /// Seeds as `a..b` (end exclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Seeds,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[command(flatten)]
    pub skew: SkewArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Run cells one after another.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CoordinatorArgs {
    #[arg(long, env = ENV_COORDINATOR_ADDR, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Participants to wait for before the round starts.
    #[arg(long)]
    pub participants: usize,
    #[arg(long, value_parser = parse_task, default_value = "classification")]
    pub task: Task,
    #[arg(long)]
    pub class_count: Option<usize>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, env = ENV_PHASE_TIMEOUT_MS, default_value_t = 30_000)]
    pub phase_timeout_ms: u64,
    #[arg(long, env = ENV_REGISTRATION_TIMEOUT_MS, default_value_t = 60_000)]
    pub registration_timeout_ms: u64,
    /// Aggregate whoever answered when a phase times out.
    #[arg(long)]
    pub allow_partial: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ParticipantArgs {
    #[arg(long, env = ENV_COORDINATOR_ADDR, default_value = "127.0.0.1:7878")]
    pub addr: String,
    #[arg(long)]
    pub id: u32,
    /// Prediction CSV; only rows with this participant's id are used.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "classification")]
    pub task: Task,
    #[arg(long)]
    pub class_count: Option<usize>,
    #[arg(long, env = ENV_REGISTRATION_TIMEOUT_MS, default_value_t = 60_000)]
    pub connect_timeout_ms: u64,
    /// Register with another schema version (for exercising the version gate).
    #[arg(long, hide = true)]
    pub schema_version: Option<u32>,
}

fn parse_metric(s: &str) -> Result<MetricSpec, String> {
    s.parse().map_err(|e: flam_core::Error| e.to_string())
}

fn parse_scheme(s: &str) -> Result<WeightScheme, String> {
    s.parse().map_err(|e: flam_core::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: flam_core::Error| e.to_string())
}

fn parse_kernel(s: &str) -> Result<KernelFamily, String> {
    s.parse().map_err(|e: flam_core::Error| e.to_string())
}

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("seed range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("seed range end: {e}"))?;
        return Ok(Seeds((a..b).collect()));
    }
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|e| format!("seed `{t}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Seeds)
}
