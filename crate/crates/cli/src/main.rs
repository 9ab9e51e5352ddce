//! `atlasforge`: batch entry points for every stage of an annotation
//! campaign.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error.

mod commands;
mod config;
mod exit;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Settings;

#[derive(Debug, Parser)]
#[command(name = "atlasforge", version, about = "Attention-guided annotation campaigns for CT segmentation")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default location for logs and outputs; falls back to the config file,
    /// then to ATLASFORGE_DATA_ROOT.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Attention maps from ensemble predictions.
    #[command(subcommand)]
    Attention(AttentionCmd),
    /// Rank attention sizes per class and select the top fraction.
    Rank(RankArgs),
    /// Run a seeded synthetic campaign end to end.
    Simulate(SimulateArgs),
    /// Dice scores of predicted label grids against ground truth.
    Evaluate(EvaluateArgs),
    /// Order evaluation reports into a leaderboard.
    Leaderboard(LeaderboardArgs),
    /// Print the 25-structure class registry.
    Registry(RegistryArgs),
    /// Serve campaigns and volumes over HTTP.
    Serve(ServeArgs),
    /// Drive a campaign event log step by step.
    #[command(subcommand)]
    Campaign(CampaignCmd),
}

#[derive(Debug, Subcommand)]
enum AttentionCmd {
    /// Write per-(volume, class) attention volumes and size records.
    Compute(AttentionArgs),
}

#[derive(Debug, Clone, Args)]
struct AttentionFlags {
    /// Overlap threshold, strictly between 0 and 1.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    overlap_scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    size_weighting: Option<WeightingArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    SameArch,
    AnyArch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightingArg {
    Voxel,
    Physical,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    /// Volume manifest listing `prediction` entries.
    #[arg(long)]
    preds: PathBuf,
    /// Comma-separated class ids; defaults to every class in the manifest.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<u8>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    attention: AttentionFlags,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// JSON-lines of `{volume, class, size}`.
    #[arg(long)]
    sizes: PathBuf,
    #[arg(long)]
    fraction: Option<f64>,
    /// Output JSON-lines priority list.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    iteration: u32,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write an iteration-0 review workspace (volumes, attention maps,
    /// an open campaign log and a development token) for `serve`.
    #[arg(long)]
    stage_review: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of predicted label grids, `<volume>.nii`.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label grids, `<volume>.nii`.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<u8>,
    /// Mean inference wall time per volume, recorded for the leaderboard.
    #[arg(long)]
    wall_time: Option<f64>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LeaderboardArgs {
    /// `entry=path` of an evaluation report; repeat per entry.
    #[arg(long = "report", required = true)]
    reports: Vec<String>,
    /// Decimals of mean DSC that count before wall time breaks ties.
    #[arg(long, default_value_t = 4)]
    decimals: u32,
    /// JSON-lines output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegistryArgs {
    /// Aligned table instead of JSON.
    #[arg(long)]
    table: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Campaign event log; repeat to serve several campaigns.
    #[arg(long = "log")]
    logs: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Volume manifest for slice requests.
    #[arg(long)]
    volumes: Option<PathBuf>,
    /// JSON object mapping bearer token to annotator id.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Where uploaded masks and fine-tune manifests are written.
    #[arg(long)]
    mask_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum CampaignCmd {
    /// Create a campaign log from a volume manifest.
    Init(InitArgs),
    /// Rank the pool and open the next iteration.
    Open(OpenArgs),
    /// Print the campaign summary.
    Status(LogArg),
    /// Record one annotator verdict.
    Revise(ReviseArgs),
    /// Export the fine-tune manifest of the open iteration.
    Export(ExportArgs),
    /// Close the iteration with the fine-tuned model's tag.
    Advance(AdvanceArgs),
    /// Senior review of a stopped campaign.
    Signoff(SignoffArgs),
}

#[derive(Debug, Args)]
struct LogArg {
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[command(flatten)]
    log: LogArg,
    #[arg(long)]
    id: String,
    /// Volume manifest; dims come from each volume's first entry.
    #[arg(long)]
    volumes: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<u8>,
    #[arg(long, default_value = "M0")]
    model_tag: String,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    stop_ratio: Option<f64>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[command(flatten)]
    attention: AttentionFlags,
}

#[derive(Debug, Args)]
struct OpenArgs {
    #[command(flatten)]
    log: LogArg,
    /// Prediction manifest of the current model.
    #[arg(long, conflicts_with = "sizes", required_unless_present = "sizes")]
    preds: Option<PathBuf>,
    /// Precomputed attention sizes (JSON-lines).
    #[arg(long)]
    sizes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VerdictArg {
    Revised,
    NoChange,
}

#[derive(Debug, Args)]
struct ReviseArgs {
    #[command(flatten)]
    log: LogArg,
    #[arg(long)]
    volume: String,
    #[arg(long)]
    class: u8,
    #[arg(long, value_enum)]
    verdict: VerdictArg,
    #[arg(long)]
    annotator: String,
    /// Revised binary mask (NIfTI); required iff the verdict is `revised`.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeChoice {
    CurrentIteration,
    Cumulative,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    log: LogArg,
    /// Overrides the campaign's configured manifest scope.
    #[arg(long, value_enum)]
    scope: Option<ScopeChoice>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AdvanceArgs {
    #[command(flatten)]
    log: LogArg,
    #[arg(long)]
    model_tag: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecisionArg {
    Approve,
    Reopen,
}

#[derive(Debug, Args)]
struct SignoffArgs {
    #[command(flatten)]
    log: LogArg,
    #[arg(long)]
    reviewer: String,
    #[arg(long, value_enum)]
    decision: DecisionArg,
    /// Restrict to these volumes; the whole campaign when omitted.
    #[arg(long, value_delimiter = ',')]
    volumes: Vec<String>,
    #[arg(long, default_value = "")]
    note: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::load(cli.config.as_deref(), cli.data_root)?;
    match cli.command {
        Command::Attention(AttentionCmd::Compute(args)) => commands::attention::compute(settings, args),
        Command::Rank(args) => commands::rank::run(settings, args),
        Command::Simulate(args) => commands::simulate::run(settings, args),
        Command::Evaluate(args) => commands::evaluate::run(settings, args),
        Command::Leaderboard(args) => commands::evaluate::leaderboard(settings, args),
        Command::Registry(args) => commands::registry::run(args),
        Command::Serve(args) => commands::serve::run(settings, args),
        Command::Campaign(cmd) => commands::campaign::run(settings, cmd),
    }
}
