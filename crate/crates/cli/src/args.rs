use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nestnet::optim::CombineMode;
use nestnet::schedule::Decay;
use nestnet::{NestingMode, PriorityOrder, Strategy};

#[derive(Debug, Parser)]
#[command(name = "nestnet", version, about = "Train and simulate nested anytime networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network per seed and write histories, checkpoints and a summary.
    Train(TrainArgs),
    /// Per-stage validation error of a checkpoint.
    Eval(EvalArgs),
    /// Deadline sweep over nested, baseline and oracle schemes.
    Sweep(SweepArgs),
    /// Accuracy versus cumulative MACs, one point per stage.
    Curves(CurvesArgs),
    /// Finite-difference and orthogonality audits on random networks.
    Gradcheck(GradcheckArgs),
    /// Print the structure and cost of a plan or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root directory for run directories.
    #[arg(long, env = "NESTNET_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name (default: timestamp and optimizer).
    #[arg(long)]
    pub run_name: Option<String>,
    /// Train seeds on separate threads.
    #[arg(long)]
    pub parallel: bool,
    /// Also train a stand-alone network matching each stage, for oracle sweeps.
    #[arg(long)]
    pub independents: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long, alias = "mode", value_parser = parse_mode)]
    pub plan: Option<NestingMode>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    pub optimizer: Option<Strategy>,
    /// Comma-separated stage order, e.g. `2,1,3`.
    #[arg(long, value_parser = parse_priority)]
    pub priority: Option<PriorityOrder>,
    #[arg(long, value_parser = parse_combine)]
    pub combine: Option<CombineMode>,
    #[arg(long)]
    pub norm_constant: Option<f64>,
    /// Comma-separated loss importances.
    #[arg(long, value_delimiter = ',')]
    pub loss_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long, value_parser = parse_decay)]
    pub lr_decay: Option<Decay>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub train_points: Option<usize>,
    #[arg(long)]
    pub val_points: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub turns: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Train from CSV files instead of the synthetic spiral (needs --val-csv).
    #[arg(long, requires = "val_csv")]
    pub train_csv: Option<PathBuf>,
    #[arg(long, requires = "train_csv")]
    pub val_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the report to this JSON file.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Anytime baseline checkpoint; without it the baseline runs only the final output.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Directory of single-stage checkpoints for the oracle schemes.
    #[arg(long)]
    pub independents: Option<PathBuf>,
    /// Comma-separated MAC budgets (default: seven across half to full cost).
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub independents: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random networks per nesting mode.
    #[arg(long, default_value_t = 10)]
    pub nets: usize,
    #[arg(long, default_value_t = 3)]
    pub max_stages: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub fd_threshold: f64,
    /// Stages of the network trained during the orthogonality audit.
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub cos_threshold: f64,
    #[arg(long, value_parser = parse_strategy, default_value = "osgd")]
    pub optimizer: Strategy,
    #[arg(long, value_parser = parse_priority)]
    pub priority: Option<PriorityOrder>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Negate analytic gradients before comparison (test hook).
    #[arg(long, hide = true)]
    pub inject_wrong_sign: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with_all = ["plan", "stages", "width", "depth"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, alias = "mode", value_parser = parse_mode)]
    pub plan: Option<NestingMode>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
}

fn parse_mode(s: &str) -> Result<NestingMode, String> {
    s.parse().map_err(|e: nestnet::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: nestnet::Error| e.to_string())
}

fn parse_priority(s: &str) -> Result<PriorityOrder, String> {
    s.parse().map_err(|e: nestnet::Error| e.to_string())
}

fn parse_combine(s: &str) -> Result<CombineMode, String> {
    match s {
        "sum" => Ok(CombineMode::Sum),
        "participation-average" | "average" => Ok(CombineMode::ParticipationAverage),
        other => Err(format!("unknown combine mode `{other}`")),
    }
}

fn parse_decay(s: &str) -> Result<Decay, String> {
    match s {
        "geometric" => Ok(Decay::Geometric),
        "linear" => Ok(Decay::Linear),
        "constant" => Ok(Decay::Constant),
        other => Err(format!("unknown decay `{other}`")),
    }
}
