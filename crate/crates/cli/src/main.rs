use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use langmerge_core::{MergeMode, NamePolicy};

mod commands;

/// Cross-lingual task-vector and adapter merging for low-resource ASR.
#[derive(Parser, Debug)]
#[command(name = "langmerge", version)]
struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every seeded stage
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Task vector = fine-tuned minus base
    Diff(DiffArgs),
    /// Apply a task vector or merge two adapters at a given lambda
    Merge(MergeArgs),
    /// Tune lambda on dev-set WER
    Tune(TuneArgs),
    /// Corpus WER of hypotheses against references
    Wer(WerArgs),
    /// Cosine similarity of two text corpora's token counts
    Sim(SimArgs),
    /// Pearson and Spearman correlation of a two-column table
    Corr(CorrArgs),
    /// Filter, clean, upsample and cap a raw manifest
    Prep(PrepArgs),
    /// Print the target-language table
    Langs(LangsArgs),
}

#[derive(Args, Debug)]
pub struct DiffArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_policy)]
    pub name_policy: Option<NamePolicy>,
}

/// The artifact merged into the target: a task vector checkpoint, or a
/// support adapter (then the target is an adapter too).
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct SupportArgs {
    #[arg(long)]
    pub task_vector: Option<PathBuf>,
    #[arg(long)]
    pub support: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Target checkpoint, or target adapter with --support
    #[arg(long)]
    pub target: PathBuf,
    #[command(flatten)]
    pub with: SupportArgs,
    /// Base checkpoint; with --support the merge is written as dense weights
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<MergeMode>,
    #[arg(long, value_parser = parse_policy)]
    pub name_policy: Option<NamePolicy>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[command(flatten)]
    pub with: SupportArgs,
    /// Base checkpoint; required with --support
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<MergeMode>,
    #[arg(long, value_parser = parse_policy)]
    pub name_policy: Option<NamePolicy>,
    /// Dev references, `id<TAB>text`
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Evaluator command with {checkpoint} {manifest} {lang} {out}
    #[arg(long)]
    pub eval_template: Option<String>,
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Target language code; selects the decoding proxy language
    #[arg(long)]
    pub lang: Option<String>,
    /// Decoding language token, overriding the table
    #[arg(long)]
    pub proxy: Option<String>,
    /// Use the quadratic mock evaluator with this optimum
    #[arg(long)]
    pub mock_optimum: Option<f64>,
    #[arg(long, requires = "mock_optimum")]
    pub mock_floor: Option<f64>,
    #[arg(long, requires = "mock_optimum")]
    pub mock_curvature: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Trial log, JSON lines
    #[arg(long)]
    pub log_out: PathBuf,
    /// Best merged checkpoint
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct WerArgs {
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub hyps: PathBuf,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Include per-utterance edit counts
    #[arg(long)]
    pub detail: bool,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    /// Text corpus, one sentence per line
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorrArgs {
    /// Two-column TSV of (similarity, delta_wer); a header row is skipped
    pub table: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Raw TSV manifest
    pub manifest: PathBuf,
    #[arg(long, default_value = "und")]
    pub lang: String,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LangsArgs {
    #[arg(long)]
    pub json: bool,
}

fn parse_mode(s: &str) -> Result<MergeMode, String> {
    s.parse().map_err(|e: langmerge_core::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<NamePolicy, String> {
    s.parse().map_err(|e: langmerge_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
