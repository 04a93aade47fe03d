//! `trace-sentinel`: ingest traces, train the trace language model, and rank
//! contract histories by likelihood.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "trace-sentinel", version, about = "Transaction trace anomaly ranking for EVM contracts")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML file with `rpc`, `[model]`, `[train]`, `[doc2vec]` and `[em]` sections
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch traces from an archive node into JSONL
    Ingest(IngestArgs),
    /// Build the token vocabulary of a corpus
    Vocab(VocabArgs),
    /// Train the trace language model
    Train(TrainArgs),
    /// Score traces with a trained model
    Score(ScoreArgs),
    /// Rank each contract's history and raise alerts
    Rank(RankArgs),
    /// Detection table over labelled scores
    Eval(EvalArgs),
    /// Comparison detectors
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Finite-difference check of the model gradients
    Gradcheck(GradcheckArgs),
    /// Scoring throughput
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Tiny,
    Desk,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum CutoffArg {
    #[default]
    Ceil,
    Floor,
}

#[derive(Debug, Args)]
pub struct TraceInput {
    /// JSONL trace files
    #[arg(long = "traces", required = true, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    /// ABI registry used to type call and log parameters
    #[arg(long)]
    pub abi: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, env = "TRACE_SENTINEL_RPC")]
    pub rpc: Option<String>,
    /// transaction hash; repeatable
    #[arg(long)]
    pub tx: Vec<String>,
    /// one `hash[,label[,tag;tag]]` per line
    #[arg(long)]
    pub tx_file: Option<PathBuf>,
    /// label applied to hashes given with `--tx`
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[command(flatten)]
    pub input: TraceInput,
    /// maximum number of non-special tokens
    #[arg(long, default_value_t = 100_000)]
    pub cap: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_packs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// per-step loss and throughput
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// also write the checkpoint every N steps
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// score only traces touching this address, attributed to it; by
    /// default each trace belongs to its root call target
    #[arg(long)]
    pub contract: Option<String>,
    /// divide by the scored token count
    #[arg(long)]
    pub per_token: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// alert the lowest alpha percent of each history
    #[arg(long, conflicts_with = "topk")]
    pub alpha: Option<f64>,
    /// alert the k lowest of each history
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub cutoff: CutoffArg,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// POST each contract's alerted rows here as JSON
    #[arg(long)]
    pub webhook: Option<String>,
    /// defaults to stdout
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub topk: Vec<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub cutoff: CutoffArg,
    /// only attacks whose adversarial transaction carries this tag
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Rank by trace length, longest first
    Length(LengthArgs),
    /// Paragraph-vector embedding of each trace
    Doc2vec(Doc2vecArgs),
    /// Mixture density of embeddings, with BIC-selected component count
    Gmm(GmmArgs),
}

#[derive(Debug, Args)]
pub struct LengthArgs {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long)]
    pub contract: Option<String>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Dbow,
    Dm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplerArg {
    Negative,
    Hierarchical,
}

#[derive(Debug, Args)]
pub struct Doc2vecArgs {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GmmArgs {
    /// embedding file from `baseline doc2vec`
    #[arg(long)]
    pub embeddings: PathBuf,
    /// traces the embeddings were computed from, for contracts and labels
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long)]
    pub contract: Option<String>,
    /// candidate component counts
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10])]
    pub components: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// soft EM instead of hard assignments
    #[arg(long)]
    pub soft: bool,
    #[arg(long)]
    pub mixture_out: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// traces to build the batch from; a synthetic corpus otherwise
    #[arg(long, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// central-difference half-width
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// trained checkpoint; a random tiny model otherwise
    #[arg(long, requires = "vocab")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub vocab: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    /// synthetic traces when no corpus is given
    #[arg(long, default_value_t = 500)]
    pub synthetic: usize,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
}

/// Bad flags or flag combinations; exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `trace-sentinel --help` for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
