//! Command functions behind the `casereader` binary. Each command reads its
//! inputs from files, writes its outputs plus a [`RunManifest`], and returns
//! the manifest.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use commands::{
    cmd_ablate_k, cmd_analyze_diversity, cmd_augment, cmd_build_casebase, cmd_evaluate, cmd_ingest,
    cmd_predict, cmd_train, run, AblationRow, CACHE_DIR_ENV,
};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "casereader",
    version,
    about = "Case-based extractive question answering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an MRQA JSONL file (plain or gzip) into the internal dataset format.
    Ingest(IngestArgs),
    /// Encode every case of a dataset into a casebase directory.
    BuildCasebase(BuildCasebaseArgs),
    /// Fine-tune a toy encoder checkpoint with the contrastive loss.
    Train(TrainArgs),
    /// Answer every question of a dataset by retrieving and reusing cases.
    Predict(PredictArgs),
    /// Score a prediction file against a dataset.
    Evaluate(EvaluateArgs),
    /// Predict and evaluate once per retrieval count k.
    AblateK(AblateKArgs),
    /// Append cases from another dataset to a casebase, parameters unchanged.
    Augment(AugmentArgs),
    /// Bucket test questions by the lexical diversity of their train clusters.
    AnalyzeDiversity(AnalyzeDiversityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Toy,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetArg {
    #[default]
    All,
    MultiMention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SpanUnitArg {
    #[default]
    Char,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LinkageArg {
    Single,
    Complete,
    #[default]
    Average,
}

/// Which encoder produced (or will produce) the vectors.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct EncoderArgs {
    /// Toy encoder checkpoint manifest.
    #[arg(long, conflicts_with = "manifest")]
    pub checkpoint: Option<PathBuf>,
    /// Imported embedding manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Entity recognition shared by masking and candidate generation.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct RecognizerArgs {
    /// Gazetteer file, one entity surface form per line.
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
}

/// Test-time retrieval options.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct FilterArgs {
    /// Disable every retrieval filter, self-exclusion included.
    #[arg(long, conflicts_with = "train_filters")]
    pub no_filters: bool,
    /// Apply the training filters (similarity floor 0.95 and wh-filter) at inference.
    #[arg(long)]
    pub train_filters: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many cases.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Keep only this many tokens on either side of the first gold answer.
    #[arg(long)]
    pub context_window: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BuildCasebaseArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = EncoderKind::Toy)]
    pub encoder: EncoderKind,
    #[command(flatten)]
    pub source: EncoderArgs,
    /// Seed for a fresh toy encoder when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = casereader::encoder::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = casereader::encoder::DEFAULT_VOCAB_BUCKETS)]
    pub vocab_buckets: usize,
    #[arg(long, default_value_t = casereader::encoder::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = casereader::encoder::DEFAULT_SELF_WEIGHT)]
    pub self_weight: f64,
    #[command(flatten)]
    pub recognizer: RecognizerArgs,
    /// Output casebase directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub casebase: PathBuf,
    /// Initial toy encoder checkpoint; must match the casebase.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = casereader::casebase::TRAIN_SIM_THRESHOLD)]
    pub threshold: f64,
    /// Turn the similarity floor off.
    #[arg(long)]
    pub no_threshold: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub wh_filter: bool,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5.0)]
    pub grad_clip: f64,
    #[arg(long)]
    pub no_grad_clip: bool,
    #[command(flatten)]
    pub recognizer: RecognizerArgs,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Also write a casebase re-encoded with the trained parameters.
    #[arg(long)]
    pub out_casebase: Option<PathBuf>,
    /// Per-epoch JSONL log; defaults to `<out-checkpoint stem>.train.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub casebase: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[command(flatten)]
    pub filters: FilterArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub recognizer: RecognizerArgs,
    /// Prediction JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    pub subset: SubsetArg,
    #[arg(long, value_enum, default_value_t = SpanUnitArg::Char)]
    pub span_unit: SpanUnitArg,
    #[command(flatten)]
    pub recognizer: RecognizerArgs,
    /// Aggregate result JSON; per-question scores go to `<stem>.instances.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateKArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub casebase: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10, 20])]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub filters: FilterArgs,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    pub subset: SubsetArg,
    #[arg(long, value_enum, default_value_t = SpanUnitArg::Char)]
    pub span_unit: SpanUnitArg,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub recognizer: RecognizerArgs,
    /// Output directory for `ablation.csv`, `ablation.json` and per-k predictions.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub casebase: PathBuf,
    #[arg(long)]
    pub new_dataset: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Number of leading cases of the new dataset to add.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[command(flatten)]
    pub recognizer: RecognizerArgs,
    /// Output casebase directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeDiversityArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// `name=predictions.jsonl`, repeatable; the first system is the reference.
    #[arg(long = "predictions-per-system", required = true)]
    pub systems: Vec<String>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Number of flat clusterings.
    #[arg(long = "C", default_value_t = casereader::diversity::DEFAULT_CLUSTERINGS)]
    pub clusterings: usize,
    /// Number of diversity buckets.
    #[arg(long = "B", default_value_t = casereader::diversity::DEFAULT_BUCKETS)]
    pub buckets: usize,
    #[arg(long, default_value_t = casereader::diversity::DEFAULT_NEIGHBORS)]
    pub neighbors: usize,
    #[arg(long, default_value_t = casereader::diversity::DEFAULT_LOWER_BOUND)]
    pub lower_bound: f64,
    #[arg(long, value_enum, default_value_t = LinkageArg::Average)]
    pub linkage: LinkageArg,
    /// File of test question ids to leave out, one per line.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub recognizer: RecognizerArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}
