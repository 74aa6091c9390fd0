use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kvbudget::allocation::{Strategy, DEFAULT_GLOBAL_RATIO, DEFAULT_RHO_MAX};
use kvbudget::importance::Scorer;
use kvbudget::metrics::DenominatorMode;
use kvbudget::prefill::{AttentionMode, DEFAULT_CHUNK_SIZE};
use kvbudget::stats::{PermutationScheme, DEFAULT_PERMUTATIONS};

#[derive(Debug, Parser)]
#[command(name = "kvbudget", version, about = "Layer-wise KV-cache budget allocation and sensitivity analysis")]
pub struct Cli {
    /// Directory for artifacts; relative `--output` paths resolve against it.
    #[arg(long, global = true, env = "KVBUDGET_OUT_DIR")]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic attention trace.
    GenTrace(GenTraceArgs),
    /// Write seeded synthetic hidden-state snapshots, one file per sample.
    GenSnapshot(GenSnapshotArgs),
    /// Per-token importance scores for the layers of a trace.
    Importance(ImportanceArgs),
    /// Per-layer pruning ratios and retained counts.
    Allocate(AllocateArgs),
    /// Chunked-prefill eviction over a trace under one plan.
    PruneSim(PruneSimArgs),
    /// Representation metrics with bootstrap intervals.
    Metrics(MetricsArgs),
    /// Permutation test, correlations and score helpers.
    Stats(StatsArgs),
    /// Run several allocation strategies over the same trace.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; stdout when absent and no output directory is set.
    #[arg(short, long)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 16)]
    pub key_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub value_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trace file (default `trace.dkvt` in the output directory).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSnapshotArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long, value_delimiter = ',', default_value = "post-attention")]
    pub stages: Vec<String>,
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Sample `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `sample_NNN.dkvr` (default `snapshots` in the output directory).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ScorerArg {
    #[default]
    H2o,
    ValueAwareL1,
    ValueAwareL2,
}

impl From<ScorerArg> for Scorer {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::H2o => Scorer::H2o,
            ScorerArg::ValueAwareL1 => Scorer::ValueAwareL1,
            ScorerArg::ValueAwareL2 => Scorer::ValueAwareL2,
        }
    }
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Only this layer; all layers when absent.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub scorer: ScorerArg,
    /// Also mark the top-`budget` tokens of each layer.
    #[arg(long)]
    pub budget: Option<usize>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum TransformArg {
    #[default]
    MinShift,
    Identity,
}

/// Flags shared by every command that builds a plan.
#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Global pruning ratio.
    #[arg(long, default_value_t = DEFAULT_GLOBAL_RATIO, allow_negative_numbers = true)]
    pub rho: f64,
    /// Per-layer cap for metric-guided strategies.
    #[arg(long, default_value_t = DEFAULT_RHO_MAX, allow_negative_numbers = true)]
    pub rho_max: f64,
    /// Per-layer metric: a `layer,value` CSV or a `metrics` report (CSV or JSON).
    #[arg(long)]
    pub metric: Option<PathBuf>,
    /// Metric to read from a report.
    #[arg(long, default_value = "infonce")]
    pub metric_name: String,
    /// Stage to read from a report; optional when the report has one stage.
    #[arg(long)]
    pub metric_stage: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    pub transform: TransformArg,
    /// Leave layer 0 unpruned under the uniform strategy.
    #[arg(long)]
    pub exempt_first: bool,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: kvbudget::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long)]
    pub layers: usize,
    /// Sequence length used for the integer counts.
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum AttentionArg {
    #[default]
    VisibleSet,
    FullContextReplay,
}

impl From<AttentionArg> for AttentionMode {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::VisibleSet => AttentionMode::VisibleSet,
            AttentionArg::FullContextReplay => AttentionMode::FullContextReplay,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
    pub chunk_size: usize,
    #[arg(long, value_enum, default_value_t)]
    pub scorer: ScorerArg,
    #[arg(long, value_enum, default_value_t)]
    pub attention: AttentionArg,
}

#[derive(Debug, Args)]
pub struct PruneSimArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Plan JSON written by `allocate`.
    #[arg(long, conflicts_with = "strategy")]
    pub plan: Option<PathBuf>,
    /// Build the plan inline instead of reading `--plan`.
    #[arg(long, value_parser = parse_strategy, required_unless_present = "plan")]
    pub strategy: Option<Strategy>,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(
        long,
        value_parser = parse_strategy,
        value_delimiter = ',',
        default_value = "uniform,mga,mlp,mlma-2,mlma-4,mlma-6"
    )]
    pub strategies: Vec<Strategy>,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum DenominatorArg {
    #[default]
    Standard,
    Literal,
}

impl From<DenominatorArg> for DenominatorMode {
    fn from(d: DenominatorArg) -> Self {
        match d {
            DenominatorArg::Standard => DenominatorMode::Standard,
            DenominatorArg::Literal => DenominatorMode::Literal,
        }
    }
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Original snapshots, one per sample.
    #[arg(long, num_args = 1.., required = true)]
    pub originals: Vec<PathBuf>,
    /// Perturbed counterparts in the same order; generated by token dropout when absent.
    #[arg(long, num_args = 1..)]
    pub augmented: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub knn_k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.1)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t)]
    pub denominator: DenominatorArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(subcommand)]
    pub command: StatsCommand,
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Permutation test for layer effects on a samples × layers table.
    Perm(PermArgs),
    /// Correlation between two columns of a CSV.
    Corr(CorrArgs),
    /// Output tokens beyond a baseline length.
    Yap(YapArgs),
    /// Standardize a list of values.
    Zscore(ZscoreArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum SchemeArg {
    #[default]
    WithinSample,
    Global,
}

impl From<SchemeArg> for PermutationScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::WithinSample => PermutationScheme::WithinSample,
            SchemeArg::Global => PermutationScheme::Global,
        }
    }
}

#[derive(Debug, Args)]
pub struct PermArgs {
    /// Score table CSV: header of layer labels, one row per sample.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub n_perm: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub scheme: SchemeArg,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum CorrMethod {
    Pearson,
    #[default]
    Spearman,
}

#[derive(Debug, Args)]
pub struct CorrArgs {
    /// CSV with a header row and numeric columns.
    #[arg(long)]
    pub input: PathBuf,
    /// Column for x (default: the first).
    #[arg(long)]
    pub x: Option<String>,
    /// Column for y (default: the second).
    #[arg(long)]
    pub y: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    pub method: CorrMethod,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct YapArgs {
    #[arg(long)]
    pub length: u64,
    #[arg(long)]
    pub baseline: u64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ZscoreArgs {
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub out: OutputArgs,
}
