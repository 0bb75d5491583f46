use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "kprompt", version, about = "Knowledge-prompted few-shot action recognition")]
pub struct Cli {
    /// Global seed; every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Log filter, e.g. `info` or `kprompt=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Knowledge-base construction.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Caption tagger training and phrase extraction.
    #[command(subcommand)]
    Tpn(TpnCommand),
    /// Frame-by-proposal score extraction into the cache.
    #[command(subcommand)]
    Semantics(SemanticsCommand),
    /// Base-class training of the temporal model.
    Train(TrainArgs),
    /// Episodic evaluation.
    Eval(EvalArgs),
    /// Render evaluation reports as a table.
    Report(ReportArgs),
    /// Write a synthetic token-bag dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Toy,
    Http,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EncoderArgs {
    /// Encoder / masked-LM backend.
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerKind>,

    /// Base URL of the HTTP service for `--scorer http`.
    #[arg(long)]
    pub endpoint: Option<String>,

    /// Matching temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AblationArgs {
    /// Feed raw frame embeddings instead of proposal scores.
    #[arg(long)]
    pub no_knowledge: bool,

    /// Use only template proposals from the knowledge base.
    #[arg(long)]
    pub no_tpn: bool,

    /// Replace the temporal network with a per-frame linear map.
    #[arg(long)]
    pub no_tmn: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset directory holding manifest.jsonl and split files.
    #[arg(long)]
    pub videos: Option<PathBuf>,

    /// Manifest file; overrides `<videos>/manifest.jsonl`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// Class split file.
    #[arg(long)]
    pub split: Option<PathBuf>,

    /// Frames sampled per video.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum KbCommand {
    Build(KbBuildArgs),
}

#[derive(Args, Debug)]
pub struct KbBuildArgs {
    #[arg(long)]
    pub states: Option<PathBuf>,
    #[arg(long)]
    pub nouns: Option<PathBuf>,
    /// Extracted proposals to merge in (repeatable).
    #[arg(long)]
    pub tpn: Vec<PathBuf>,
    /// Keep template proposals whose masked noun scores at least this.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Reference text for the toy masked-token scorer.
    #[arg(long)]
    pub lm_corpus: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum TpnCommand {
    Train(TpnTrainArgs),
    Extract(TpnExtractArgs),
}

#[derive(Args, Debug)]
pub struct TpnTrainArgs {
    /// `token<TAB>label` file, blank line between documents.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hash buckets per window slot.
    #[arg(long)]
    pub hash_dim: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TpnExtractArgs {
    /// Caption files or directories of `.txt` captions (repeatable).
    #[arg(long, required = true)]
    pub captions: Vec<PathBuf>,
    #[arg(long)]
    pub tagger: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum SemanticsCommand {
    Extract(SemanticsExtractArgs),
}

#[derive(Args, Debug)]
pub struct SemanticsExtractArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Tmn,
    Zeroshot,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: Option<EvalMode>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Samplings averaged per query video.
    #[arg(long)]
    pub samplings: Option<usize>,
    /// Also draw several samplings of each support video.
    #[arg(long)]
    pub resample_support: bool,
    /// Report the top-k proposals by input-gradient magnitude.
    #[arg(long)]
    pub importance: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
    Md,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation report JSON (repeatable).
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ReportFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Classes differ only in motif order.
    Order,
    /// Each class's name appears in its frames.
    Named,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub base_classes: Option<usize>,
    #[arg(long)]
    pub videos_per_class: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
