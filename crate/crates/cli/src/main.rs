//! `concreteness`: score, standardize, fuse and curate caption corpora.
//!
//! Every command prints a `key=value` summary on stdout and exits non-zero on
//! error.

mod commands;
mod shards;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concreteness_core::fusion::Binarize;
use concreteness_core::standardize::LengthUnit;
use concreteness_core::{ReadMode, SelectionMethod, TargetSpace, Transform};

#[derive(Parser, Debug)]
#[command(name = "concreteness", version, about = "Caption concreteness scoring and dataset curation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attach a score to every record via a scorer endpoint
    Score(ScoreArgs),
    /// Fit per-length standardization statistics for one score
    StandardizeFit(StandardizeFitArgs),
    /// Add `<score>_std` to every record using a fitted model
    StandardizeApply(StandardizeApplyArgs),
    /// Fit fusion weights against human annotations
    FuseFit(FuseFitArgs),
    /// Add the fused score to every record
    FuseApply(FuseApplyArgs),
    /// Select a subset of the corpus
    Filter(FilterArgs),
    /// Correlate a score with human annotations
    EvalCorr(EvalCorrArgs),
    /// Write {caption, target} pairs for training a student regressor
    EmitDistill(EmitDistillArgs),
    /// Split a corpus into seeded, disjoint parts
    Split(SplitArgs),
    /// Re-shard a corpus into fixed-size files plus a manifest
    Shard(ShardArgs),
    /// Epoch count for a fixed iteration budget over a selection
    PlanEpochs(PlanEpochsArgs),
    /// Serve the deterministic stub (or a lookup table) over stdin/stdout
    StubScorer(StubScorerArgs),
}

#[derive(Args, Debug, Clone, Copy)]
struct ModeArgs {
    /// Abort on the first malformed line or missing score (the default)
    #[arg(long, conflicts_with = "lenient")]
    strict: bool,
    /// Skip and count malformed lines and records missing a needed score
    #[arg(long)]
    lenient: bool,
}

impl ModeArgs {
    fn mode(self) -> ReadMode {
        if self.lenient {
            ReadMode::Lenient
        } else {
            ReadMode::Strict
        }
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Output corpus
    #[arg(long)]
    output: PathBuf,
    /// Endpoint: cmd:<argv>, tcp:<host>:<port>, stub: or table:<path>
    #[arg(long)]
    endpoint: String,
    /// Name under which the score is attached
    #[arg(long)]
    score: String,
    /// Where records whose scoring failed go [default: <output>.failures.jsonl]
    #[arg(long)]
    failures: Option<PathBuf>,
    /// Requests per scoring batch
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Requests outstanding on one connection, at most
    #[arg(long, default_value_t = 64)]
    max_in_flight: usize,
    /// Seconds to wait for the next response before giving up
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    /// Shards scored concurrently, one endpoint connection each
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransformArg {
    Standard,
    PaperLiteral,
}

impl From<TransformArg> for Transform {
    fn from(t: TransformArg) -> Self {
        match t {
            TransformArg::Standard => Transform::Standard,
            TransformArg::PaperLiteral => Transform::PaperLiteral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LengthArg {
    Words,
    Chars,
}

impl From<LengthArg> for LengthUnit {
    fn from(l: LengthArg) -> Self {
        match l {
            LengthArg::Words => LengthUnit::Words,
            LengthArg::Chars => LengthUnit::Chars,
        }
    }
}

#[derive(Args, Debug)]
struct StandardizeFitArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Where the fitted model is written
    #[arg(long)]
    output: PathBuf,
    /// Score to standardize
    #[arg(long)]
    score: String,
    #[arg(long, value_enum, default_value_t = TransformArg::Standard)]
    transform: TransformArg,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    target_mu: f64,
    #[arg(long, default_value_t = 1.0)]
    target_sigma: f64,
    /// Similarities are clamped into [eps, 1 - eps] before the transform
    #[arg(long, default_value_t = 1e-4)]
    clamp_eps: f64,
    /// Smaller length buckets use the pooled statistics
    #[arg(long, default_value_t = 20)]
    min_bucket_count: u64,
    #[arg(long, value_enum, default_value_t = LengthArg::Words)]
    length_unit: LengthArg,
    /// Shards processed in parallel
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct StandardizeApplyArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Output corpus
    #[arg(long)]
    output: PathBuf,
    /// Fitted model from standardize-fit
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    score: String,
    /// Shards processed in parallel
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

fn parse_binarize(s: &str) -> Result<Binarize, String> {
    if s == "median" {
        return Ok(Binarize::Median);
    }
    s.parse::<f64>()
        .ok()
        .filter(|t| t.is_finite())
        .map(Binarize::Threshold)
        .ok_or_else(|| format!("expected `median` or a number, got {s:?}"))
}

#[derive(Args, Debug)]
struct FuseFitArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Annotation TSV (`# scale min max`, then `id<TAB>score` rows)
    #[arg(long)]
    annotations: PathBuf,
    /// Where the fitted parameters are written
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "vba_std")]
    vba: String,
    #[arg(long, default_value = "sba_std")]
    sba: String,
    /// `median` or a numeric cut; labels strictly above it are positive
    #[arg(long, default_value = "median", value_parser = parse_binarize)]
    binarize: Binarize,
    /// Ridge penalty on a and b
    #[arg(long, default_value_t = 1e-6)]
    l2: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct FuseApplyArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Output corpus
    #[arg(long)]
    output: PathBuf,
    /// Parameter file or the preset `paper-a8`
    #[arg(long, default_value = "paper-a8")]
    params: String,
    #[arg(long, default_value = "vba_std")]
    vba: String,
    #[arg(long, default_value = "sba_std")]
    sba: String,
    /// Name of the fused score
    #[arg(long, default_value = "icc")]
    out: String,
    /// Shards processed in parallel
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    #[value(name = "top_k", alias = "top-k")]
    TopK,
    Threshold,
    Random,
}

impl From<MethodArg> for SelectionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::TopK => SelectionMethod::TopK,
            MethodArg::Threshold => SelectionMethod::Threshold,
            MethodArg::Random => SelectionMethod::Random,
        }
    }
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Output corpus
    #[arg(long)]
    output: PathBuf,
    /// Selection spec file; replaces --method/--score/--k/--theta/--seed
    #[arg(long, conflicts_with_all = ["method", "score", "k", "theta", "seed"])]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "spec")]
    method: Option<MethodArg>,
    /// Score to rank or threshold on
    #[arg(long)]
    score: Option<String>,
    /// Records to keep (top_k, random)
    #[arg(long)]
    k: Option<usize>,
    /// Keep records whose score is at least this (threshold)
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    /// Seed for random selection
    #[arg(long)]
    seed: Option<u64>,
    /// Shards processed in parallel
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct EvalCorrArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Score to evaluate
    #[arg(long)]
    score: String,
    /// Annotation TSV to correlate against
    #[arg(long)]
    annotations: PathBuf,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    Probability,
    Logit,
}

impl From<TargetArg> for TargetSpace {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Probability => TargetSpace::Probability,
            TargetArg::Logit => TargetSpace::Logit,
        }
    }
}

#[derive(Args, Debug)]
struct EmitDistillArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Output corpus
    #[arg(long)]
    output: PathBuf,
    /// Score used as the regression target
    #[arg(long, default_value = "icc")]
    score: String,
    #[arg(long, value_enum, default_value_t = TargetArg::Probability)]
    target: TargetArg,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Directory receiving part-<i>.jsonl
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated part fractions summing to at most 1
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct ShardArgs {
    /// Input corpus files (glob)
    #[arg(long)]
    input: String,
    /// Directory receiving the shards and manifest.json
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    shard_size: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct PlanEpochsArgs {
    /// Corpus size before filtering
    #[arg(long)]
    dataset_size: u64,
    /// Fixed number of training iterations
    #[arg(long)]
    iterations: u64,
    #[arg(long)]
    batch_size: u64,
    /// Records kept by the filter
    #[arg(long)]
    selected: u64,
}

#[derive(Args, Debug)]
struct StubScorerArgs {
    /// Answer from a file of {"id", "score"} lines instead of the hash stub
    #[arg(long)]
    table: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
