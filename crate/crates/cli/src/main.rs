mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plcurate::bank::BankStrategy;

/// Exit codes are a stable contract: 0 success, 2 bad input, 3 I/O failure.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<plcurate::Error> for CliError {
    fn from(e: plcurate::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Io(e.to_string())
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "plcurate", version, about = "Pseudo-label curation for self-training object detectors")]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run self-training simulations and write report.csv and metrics.json.
    Simulate(SimulateArgs),
    /// Combine detection files with NMS, Soft-NMS or WBF.
    Fuse(FuseArgs),
    /// Create, update or export a pseudo-label memory bank.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON config: one object or an array of objects.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in run bundle (default, comparison, epsilon-sweep, interval-10, mevc, direct).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the seed of every run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write outputs; defaults to the config's output_dir, then ./plcurate-out.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FuseMethod {
    Nms,
    SoftNms,
    Wbf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Detection JSONL files; WBF treats each file as one source.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub method: FuseMethod,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Soft-NMS Gaussian width.
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Soft-NMS drops detections decaying below this score.
    #[arg(long, default_value_t = 0.001)]
    pub score_floor: f64,
    /// WBF: scale fused scores by min(n, T) / T with T the number of inputs.
    #[arg(long)]
    pub rescale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Wbf,
    Direct,
    Mevc,
}

impl From<StrategyArg> for BankStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Wbf => BankStrategy::Wbf,
            StrategyArg::Direct => BankStrategy::Direct,
            StrategyArg::Mevc => BankStrategy::Mevc,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum BankCommand {
    /// Build a bank from initial predictions.
    Init(BankInitArgs),
    /// Apply one update round with new predictions.
    Update(BankUpdateArgs),
    /// Write the bank's pseudo labels as detection JSONL.
    Export(BankExportArgs),
}

#[derive(Args, Debug)]
pub struct BankInitArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, value_enum, default_value = "wbf")]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub init_conf: Option<f64>,
    #[arg(long)]
    pub fuse_conf: Option<f64>,
    #[arg(long)]
    pub iou_match: Option<f64>,
    #[arg(long)]
    pub direct_conf: Option<f64>,
    #[arg(long)]
    pub mevc_positive: Option<f64>,
    #[arg(long)]
    pub mevc_ignore: Option<f64>,
    /// WBF confidence rescaling for later updates.
    #[arg(long)]
    pub rescale: bool,
}

#[derive(Args, Debug)]
pub struct BankUpdateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Must match the strategy recorded in the bank file.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Write the updated bank here instead of replacing the input.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BankExportArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Skip ignore-status entries.
    #[arg(long)]
    pub positive_only: bool,
    /// Only export labels scoring above this.
    #[arg(long)]
    pub min_score: Option<f64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Number of classes; defaults to one past the largest class id seen.
    #[arg(long)]
    pub classes: Option<u32>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Score cut for precision/recall.
    #[arg(long, default_value_t = 0.0)]
    pub min_score: f64,
    /// Equal-width confidence bins for the FP histogram.
    #[arg(long, default_value_t = 10, conflicts_with = "bin_edges")]
    pub bins: usize,
    /// Explicit comma-separated bin edges, e.g. 0,0.3,1.
    #[arg(long, value_delimiter = ',')]
    pub bin_edges: Option<Vec<f64>>,
    /// Confidence splitting the FP rate into low and high regions.
    #[arg(long, default_value_t = 0.3)]
    pub tau: f64,
    /// Loss-record CSV (image_id, label_idx, cls_loss, loc_loss, confidence, is_tp).
    #[arg(long)]
    pub loss_records: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub simple_threshold: f64,
    /// Count ground-truth images missing from the detections as images with no
    /// detections instead of leaving them out.
    #[arg(long)]
    pub keep_gt_only: bool,
    /// Metrics JSON path; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Per-bin CSV path.
    #[arg(long)]
    pub bins_csv: Option<PathBuf>,
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("PLCURATE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("PLCURATE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Io(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Bank(BankCommand::Init(a)) => commands::bank_init(&a),
        Command::Bank(BankCommand::Update(a)) => commands::bank_update(&a),
        Command::Bank(BankCommand::Export(a)) => commands::bank_export(&a),
        Command::Eval(a) => commands::eval(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
