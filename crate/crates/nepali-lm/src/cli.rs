//! Command-line entry point: one binary, verb-noun subcommands, a shared
//! TOML configuration file, and flag overrides.
//!
//! Every subcommand is reproducible: the same configuration and seed give
//! identical artifacts. Commands that write into the output directory also
//! echo the effective configuration there as `effective-config.toml`, so
//! each run is self-describing.
//!
//! Exit codes: 0 success, 2 usage error (including a tokenizer vocabulary
//! below the minimum), 1 runtime error. Errors print to standard error as
//! a single `error: ...` line.

use std::fs;
use std::io::{BufRead, Write as _};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    clean, compute_stats, ingest, segment_sentences, shard, word_frequencies, CleanCorpus,
    CleaningPolicy, DropUnit, Origin, DEFAULT_LINES_PER_SHARD,
};
use crate::eval::{
    evaluate_qa, export_annotation_sheet, parse_annotation_sheet, score_annotations,
    score_annotations_majority, sentence_completion_eval, RougeReport,
};
use crate::model::{
    generate, load_checkpoint, perplexity, save_checkpoint, train_clm, Checkpoint, EpochMetrics,
    GenerateOptions, ModelConfig, SamplingStrategy, TrainConfig,
};
use crate::qa::{
    answer, finetune, load_qa, split_qa, write_split_manifest, DatasetSplit, FinetuneConfig,
    PromptTemplate,
};
use crate::tokenizer::{train_bpe, TokenizerError, TokenizerModel, TrainParams, EOS_ID};

/// Marks an error as the caller's fault; mapped to exit code 2.
#[derive(Debug, Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|cause| {
        cause.downcast_ref::<UsageError>().is_some()
            || matches!(
                cause.downcast_ref::<TokenizerError>(),
                Some(TokenizerError::VocabTooSmall { .. })
            )
    });
    if is_usage {
        2
    } else {
        1
    }
}

/// Parses arguments from the environment, runs the command, and maps
/// errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

// --- configuration file -------------------------------------------------

/// The shared pipeline configuration. Every field has a default, so an
/// absent file or empty table is valid; explicit command-line flags
/// override file values. The global `seed` feeds every seeded operation
/// whose section does not set its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: PathsConfig,
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub qa: QaSection,
    pub generate: GenerateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            output_dir: PathBuf::from("out"),
            paths: PathsConfig::default(),
            corpus: CorpusSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            finetune: FinetuneSection::default(),
            qa: QaSection::default(),
            generate: GenerateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw input documents (directory) for `corpus clean`.
    pub corpus_dir: PathBuf,
    /// Cleaned corpus text, one line per line.
    pub clean_corpus: PathBuf,
    pub tokenizer: PathBuf,
    /// Pretrained checkpoint (last epoch); the best-validation snapshot
    /// is written alongside with a `-best` suffix.
    pub checkpoint: PathBuf,
    pub finetuned_checkpoint: PathBuf,
    /// QA dataset: a JSON array of {question, answer} records.
    pub qa_dataset: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus_dir: PathBuf::from("data/raw"),
            clean_corpus: PathBuf::from("out/clean.txt"),
            tokenizer: PathBuf::from("out/tokenizer.txt"),
            checkpoint: PathBuf::from("out/model.ckpt"),
            finetuned_checkpoint: PathBuf::from("out/model-qa.ckpt"),
            qa_dataset: PathBuf::from("data/qa.json"),
        }
    }
}

/// Cleaning policy in file form. Blocks are written as inclusive
/// codepoint ranges in hex, for example "0900..097F".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub allowed_blocks: Vec<String>,
    pub reject_latin_alphanumeric: bool,
    pub drop_unit: DropUnit,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            allowed_blocks: vec!["0900..097F".to_string()],
            reject_latin_alphanumeric: true,
            drop_unit: DropUnit::Line,
        }
    }
}

fn parse_block(s: &str) -> anyhow::Result<RangeInclusive<char>> {
    let err = || usage(format!("bad codepoint range {s:?}, want e.g. \"0900..097F\""));
    let (lo, hi) = s.split_once("..").ok_or_else(err)?;
    let cp = |h: &str| u32::from_str_radix(h.trim(), 16).ok().and_then(char::from_u32);
    match (cp(lo), cp(hi)) {
        (Some(lo), Some(hi)) if lo <= hi => Ok(lo..=hi),
        _ => Err(err()),
    }
}

impl CorpusSection {
    pub fn to_policy(&self) -> anyhow::Result<CleaningPolicy> {
        let allowed_blocks = self
            .allowed_blocks
            .iter()
            .map(|s| parse_block(s))
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok(CleaningPolicy {
            allowed_blocks,
            reject_latin_alphanumeric: self.reject_latin_alphanumeric,
            drop_unit: self.drop_unit,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub target_vocab: usize,
    pub min_pair_freq: u64,
    pub nfc: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let p = TrainParams::default();
        TokenizerSection {
            target_vocab: p.target_vocab,
            min_pair_freq: p.min_pair_freq,
            nfc: p.nfc,
        }
    }
}

impl TokenizerSection {
    fn to_params(&self) -> TrainParams {
        TrainParams {
            target_vocab: self.target_vocab,
            min_pair_freq: self.min_pair_freq,
            nfc: self.nfc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Gpt2,
}

/// Model shape: a named preset plus optional per-field overrides. The
/// vocabulary size always comes from the tokenizer in use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: Preset::Tiny,
            context_len: None,
            d_model: None,
            n_layers: None,
            n_heads: None,
            d_ff: None,
            dropout: None,
            init_std: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Tiny => ModelConfig::tiny(vocab_size),
            Preset::Gpt2 => ModelConfig::gpt2(vocab_size),
        };
        if let Some(v) = self.context_len {
            cfg.context_len = v;
        }
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.n_layers {
            cfg.n_layers = v;
        }
        if let Some(v) = self.n_heads {
            cfg.n_heads = v;
        }
        if let Some(v) = self.d_ff {
            cfg.d_ff = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.init_std {
            cfg.init_std = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub train_batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of windows held out for validation.
    pub val_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            train_batch_size: t.train_batch_size,
            eval_batch_size: t.eval_batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            val_fraction: 0.1,
            seed: None,
        }
    }
}

impl TrainSection {
    fn to_train_config(&self, global_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            train_batch_size: self.train_batch_size,
            eval_batch_size: self.eval_batch_size,
            epochs: self.epochs,
            seed: self.seed.unwrap_or(global_seed),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FinetunePreset {
    /// Stable desk-scale settings (learning rate 5e-5).
    Recommended,
    /// The published settings (learning rate 0.01).
    Published,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub preset: FinetunePreset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_only_loss: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            preset: FinetunePreset::Recommended,
            max_length: None,
            learning_rate: None,
            weight_decay: None,
            warmup_ratio: None,
            train_batch_size: None,
            eval_batch_size: None,
            epochs: None,
            answer_only_loss: None,
            seed: None,
        }
    }
}

impl FinetuneSection {
    fn to_finetune_config(&self, global_seed: u64) -> FinetuneConfig {
        let mut fc = match self.preset {
            FinetunePreset::Recommended => FinetuneConfig::recommended(),
            FinetunePreset::Published => FinetuneConfig::published(),
        };
        if let Some(v) = self.max_length {
            fc.max_length = v;
        }
        if let Some(v) = self.learning_rate {
            fc.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            fc.weight_decay = v;
        }
        if let Some(v) = self.warmup_ratio {
            fc.warmup_ratio = v;
        }
        if let Some(v) = self.train_batch_size {
            fc.train_batch_size = v;
        }
        if let Some(v) = self.eval_batch_size {
            fc.eval_batch_size = v;
        }
        if let Some(v) = self.epochs {
            fc.epochs = v;
        }
        if let Some(v) = self.answer_only_loss {
            fc.answer_only_loss = v;
        }
        fc.seed = self.seed.unwrap_or(global_seed);
        fc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    /// Train/validation/test fractions; must sum to 1.
    pub ratios: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for QaSection {
    fn default() -> Self {
        QaSection {
            ratios: [0.8, 0.1, 0.1],
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Greedy,
    Temperature,
    Topk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub max_new_tokens: usize,
    pub strategy: StrategyName,
    pub temperature: f64,
    pub top_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            max_new_tokens: 100,
            strategy: StrategyName::Greedy,
            temperature: 1.0,
            top_k: 50,
            seed: None,
        }
    }
}

impl GenerateSection {
    fn to_options(&self) -> GenerateOptions {
        let strategy = match self.strategy {
            StrategyName::Greedy => SamplingStrategy::Greedy,
            StrategyName::Temperature => SamplingStrategy::Temperature(self.temperature),
            StrategyName::Topk => SamplingStrategy::TopK {
                k: self.top_k,
                temperature: self.temperature,
            },
        };
        GenerateOptions {
            max_new_tokens: self.max_new_tokens,
            strategy,
            ..GenerateOptions::default()
        }
    }
}

// --- argument grammar ----------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "nepali-gpt",
    version,
    about = "Devanagari corpus cleaning, BPE tokenization, causal LM training, \
             QA fine-tuning, and evaluation",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Configuration file (TOML); explicit flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, profile, and shard text corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train and use the subword tokenizer.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Pretrain, score, and sample the language model.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Split, fine-tune on, and answer from QA data.
    #[command(subcommand)]
    Qa(QaCmd),
    /// ROUGE, completion, QA, and human-annotation evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Clean raw documents into one text file of surviving lines.
    Clean {
        /// Input files or directories (default: the configured corpus_dir).
        inputs: Vec<PathBuf>,
        /// Where to write the cleaned corpus (default: configured path).
        #[arg(long, value_name = "FILE")]
        out_file: Option<PathBuf>,
    },
    /// Profile a cleaned corpus: line/word/sentence/character counts.
    Stats {
        /// Cleaned corpus file or directory (default: configured path).
        input: Option<PathBuf>,
    },
    /// Most frequent words as a TSV table.
    Freq {
        #[arg(long, default_value_t = 50)]
        top: usize,
        input: Option<PathBuf>,
    },
    /// Split a cleaned corpus into fixed-size shard files.
    Shard {
        #[arg(long, default_value_t = DEFAULT_LINES_PER_SHARD)]
        lines: usize,
        input: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCmd {
    /// Train a BPE tokenizer on a cleaned corpus and save it.
    Train {
        /// Target vocabulary size including specials and characters.
        #[arg(long)]
        vocab: Option<usize>,
        input: Option<PathBuf>,
    },
    /// Encode standard-input lines as space-separated token ids.
    Encode {
        #[arg(long, value_name = "FILE")]
        tokenizer: Option<PathBuf>,
    },
    /// Decode lines of space-separated token ids back to text.
    Decode {
        #[arg(long, value_name = "FILE")]
        tokenizer: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// Pretrain a causal LM on a cleaned corpus.
    Pretrain {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Cleaned corpus file (default: configured path).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Perplexity of a checkpoint on a text file.
    Perplexity {
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a continuation of a prompt.
    Generate {
        /// Prompt text; empty starts from the beginning-of-sequence token.
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, value_enum)]
        strategy: Option<StrategyName>,
        /// Maximum number of new tokens.
        #[arg(long, value_name = "N")]
        max_new: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    let err = || format!("bad ratios {s:?}, want three comma-separated fractions like 0.8,0.1,0.1");
    if parts.len() != 3 {
        return Err(err());
    }
    let mut v = [0.0f64; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| err())?;
    }
    Ok((v[0], v[1], v[2]))
}

#[derive(Debug, Subcommand)]
pub enum QaCmd {
    /// Split the QA dataset and write train/validation/test id manifests.
    Split {
        /// Train,validation,test fractions summing to 1.
        #[arg(long, value_parser = parse_ratios)]
        ratios: Option<(f64, f64, f64)>,
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a pretrained checkpoint on the QA training split.
    Finetune {
        #[arg(long, value_enum)]
        preset: Option<FinetunePreset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Answer a single question with the fine-tuned model.
    Ask {
        question: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        max_new: Option<usize>,
    },
    /// Read questions from standard input, print one answer per line.
    Chat {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// ROUGE-1/2/L of a candidate text file against a reference.
    Rouge {
        #[arg(long, value_name = "FILE")]
        candidate: PathBuf,
        #[arg(long, value_name = "FILE")]
        reference: PathBuf,
    },
    /// Sentence-completion scores for the pretrained model.
    Completion {
        /// Number of sentences to evaluate.
        #[arg(long, default_value_t = 50)]
        k: usize,
        /// Text file of evaluation sentences (default: cleaned corpus).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// ROUGE of generated answers against gold answers on the test split.
    Qa {
        /// Sample size from the test split.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export or score human annotation sheets.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCmd {
    /// Write a blank annotation sheet of generated answers.
    Export {
        /// Number of test questions to include.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "FILE")]
        out_file: Option<PathBuf>,
    },
    /// Score filled sheets; each file's stem names its annotator.
    Score {
        /// Filled annotation sheets (one per annotator).
        sheets: Vec<PathBuf>,
        /// Majority vote per sample instead of pooling all judgments.
        #[arg(long)]
        majority: bool,
    },
}

// --- shared helpers ------------------------------------------------------

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("cannot parse config {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Writes the effective configuration into `dir` so the run is
/// self-describing.
fn echo_config(cfg: &PipelineConfig, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let text = toml::to_string_pretty(cfg).context("cannot serialize effective config")?;
    let path = dir.join("effective-config.toml");
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Reads an already-cleaned corpus from a file, or from every regular
/// file directly inside a directory (sorted by name).
fn read_clean_corpus(path: &Path) -> anyhow::Result<CleanCorpus> {
    let mut lines = Vec::new();
    for file in input_files(path)? {
        let text = fs::read_to_string(&file)
            .with_context(|| format!("cannot read corpus {}", file.display()))?;
        lines.extend(text.lines().map(str::to_owned));
    }
    Ok(CleanCorpus::from_lines(lines, path.display().to_string()))
}

/// Expands a file-or-directory path into concrete files.
fn input_files(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("cannot read directory {}", path.display()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(usage(format!("no input files under {}", path.display())));
        }
        Ok(files)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(usage(format!("input {} does not exist", path.display())))
    }
}

fn load_tokenizer(path: &Path) -> anyhow::Result<TokenizerModel> {
    TokenizerModel::load(path)
        .with_context(|| format!("cannot load tokenizer {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint<f32>> {
    load_checkpoint::<f32>(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Token stream for language modeling: each corpus line is encoded and
/// terminated with the eos token, so line boundaries are visible to the
/// model and generation can stop at them.
fn corpus_stream(corpus: &CleanCorpus, tokenizer: &TokenizerModel) -> Vec<u32> {
    let mut stream = Vec::new();
    for line in corpus.lines() {
        stream.extend(tokenizer.encode(line));
        stream.push(EOS_ID);
    }
    stream
}

fn resolve_seed(flag: Option<u64>, section: Option<u64>, global: u64) -> u64 {
    flag.or(section).unwrap_or(global)
}

/// `model.ckpt` -> `model-best.ckpt`, preserving directory and extension.
fn best_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let name = match path.extension().and_then(|s| s.to_str()) {
        Some(ext) => format!("{stem}-best.{ext}"),
        None => format!("{stem}-best"),
    };
    path.with_file_name(name)
}

fn save_ckpt(ckpt: &Checkpoint<f32>, path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    save_checkpoint(path, ckpt).with_context(|| format!("cannot save {}", path.display()))
}

fn metrics_line(metrics: &EpochMetrics, wall_clock_s: f64) -> String {
    let mut value = serde_json::to_value(metrics).expect("metrics serialize");
    value
        .as_object_mut()
        .expect("metrics are an object")
        .insert("wall_clock_s".into(), wall_clock_s.into());
    value.to_string()
}

fn print_epoch(metrics: &EpochMetrics) {
    let val = match (metrics.val_loss, metrics.val_ppl) {
        (Some(loss), Some(ppl)) => format!(" val_loss {loss:.4} val_ppl {ppl:.3}"),
        _ => String::new(),
    };
    println!(
        "epoch {} step {} train_loss {:.4} train_ppl {:.3}{val}",
        metrics.epoch, metrics.step, metrics.train_loss, metrics.train_ppl
    );
}

// --- command execution ---------------------------------------------------

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Corpus(cmd) => run_corpus(cmd, cfg),
        Command::Tokenizer(cmd) => run_tokenizer(cmd, cfg),
        Command::Model(cmd) => run_model(cmd, cfg),
        Command::Qa(cmd) => run_qa(cmd, cfg),
        Command::Eval(cmd) => run_eval(cmd, cfg),
    }
}

fn run_corpus(cmd: CorpusCmd, cfg: PipelineConfig) -> anyhow::Result<()> {
    match cmd {
        CorpusCmd::Clean { inputs, out_file } => {
            let roots = if inputs.is_empty() {
                vec![cfg.paths.corpus_dir.clone()]
            } else {
                inputs
            };
            let mut files = Vec::new();
            for root in &roots {
                files.extend(input_files(root)?);
            }
            let policy = cfg.corpus.to_policy()?;
            let docs = ingest(&files, Origin::Other).collect::<Result<Vec<_>, _>>()?;
            let (corpus, report) = clean(&docs, &policy)?;
            let out_path = out_file.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            write_text(&out_path, &corpus.to_text())?;
            echo_config(&cfg, &cfg.output_dir)?;
            let summary = format!(
                "input_lines {}\nkept_lines {}\ndropped_lines {}\n\
                 dropped_tokens {}\nstripped_chars {}\n",
                report.input_lines,
                report.kept_lines,
                report.dropped_lines,
                report.dropped_tokens,
                report.stripped_chars
            );
            write_text(&cfg.output_dir.join("clean-report.txt"), &summary)?;
            print!("{summary}");
            println!("cleaned corpus written to {}", out_path.display());
        }
        CorpusCmd::Stats { input } => {
            let path = input.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            let corpus = read_clean_corpus(&path)?;
            let stats = compute_stats(&corpus);
            let text = stats.to_text_report();
            echo_config(&cfg, &cfg.output_dir)?;
            write_text(&cfg.output_dir.join("corpus-stats.txt"), &text)?;
            print!("{text}");
        }
        CorpusCmd::Freq { top, input } => {
            let path = input.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            let corpus = read_clean_corpus(&path)?;
            let table = word_frequencies(&corpus, Some(top));
            let text = table.to_tsv();
            echo_config(&cfg, &cfg.output_dir)?;
            write_text(&cfg.output_dir.join("word-frequencies.tsv"), &text)?;
            print!("{text}");
        }
        CorpusCmd::Shard { lines, input } => {
            let path = input.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            let corpus = read_clean_corpus(&path)?;
            let dir = cfg.output_dir.join("shards");
            let paths = shard(&corpus, lines, &dir)?;
            echo_config(&cfg, &cfg.output_dir)?;
            println!("wrote {} shards to {}", paths.len(), dir.display());
        }
    }
    Ok(())
}

fn run_tokenizer(cmd: TokenizerCmd, mut cfg: PipelineConfig) -> anyhow::Result<()> {
    match cmd {
        TokenizerCmd::Train { vocab, input } => {
            if let Some(v) = vocab {
                cfg.tokenizer.target_vocab = v;
            }
            let path = input.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            let corpus = read_clean_corpus(&path)?;
            let tok = train_bpe(&corpus, &cfg.tokenizer.to_params())?;
            if let Some(parent) = cfg.paths.tokenizer.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)
                        .with_context(|| format!("cannot create {}", parent.display()))?;
                }
            }
            tok.save(&cfg.paths.tokenizer)?;
            echo_config(&cfg, &cfg.output_dir)?;
            println!(
                "trained tokenizer: vocab {} merges {} -> {}",
                tok.vocab_size(),
                tok.merges().len(),
                cfg.paths.tokenizer.display()
            );
        }
        TokenizerCmd::Encode { tokenizer } => {
            let path = tokenizer.unwrap_or_else(|| cfg.paths.tokenizer.clone());
            let tok = load_tokenizer(&path)?;
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                let line = line.context("cannot read standard input")?;
                let ids: Vec<String> = tok.encode(&line).iter().map(u32::to_string).collect();
                println!("{}", ids.join(" "));
            }
        }
        TokenizerCmd::Decode { tokenizer } => {
            let path = tokenizer.unwrap_or_else(|| cfg.paths.tokenizer.clone());
            let tok = load_tokenizer(&path)?;
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                let line = line.context("cannot read standard input")?;
                let ids = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<u32>()
                            .map_err(|_| anyhow::anyhow!("{t:?} is not a token id"))
                    })
                    .collect::<anyhow::Result<Vec<u32>>>()?;
                println!("{}", tok.decode(&ids)?);
            }
        }
    }
    Ok(())
}

fn run_model(cmd: ModelCmd, mut cfg: PipelineConfig) -> anyhow::Result<()> {
    match cmd {
        ModelCmd::Pretrain {
            preset,
            epochs,
            input,
            seed,
        } => {
            if let Some(p) = preset {
                cfg.model.preset = p;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = Some(s);
            }
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            let path = input.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            let corpus = read_clean_corpus(&path)?;
            let stream = corpus_stream(&corpus, &tok);
            let model_cfg = cfg.model.build(tok.vocab_size());
            let train_cfg = cfg.train.to_train_config(cfg.seed);
            echo_config(&cfg, &cfg.output_dir)?;

            let log_path = cfg.output_dir.join("pretrain-metrics.jsonl");
            let mut log = fs::File::create(&log_path)
                .with_context(|| format!("cannot create {}", log_path.display()))?;
            let mut tick = Instant::now();
            let mut on_epoch = |m: &EpochMetrics| -> bool {
                let wall = tick.elapsed().as_secs_f64();
                tick = Instant::now();
                let _ = writeln!(log, "{}", metrics_line(m, wall));
                print_epoch(m);
                true
            };
            let outcome = train_clm::<f32>(
                &model_cfg,
                &train_cfg,
                &stream,
                cfg.train.val_fraction,
                None,
                Some(&mut on_epoch),
            )?;
            save_ckpt(&outcome.last, &cfg.paths.checkpoint)?;
            save_ckpt(&outcome.best, &best_path(&cfg.paths.checkpoint))?;
            println!(
                "checkpoint written to {} (best to {})",
                cfg.paths.checkpoint.display(),
                best_path(&cfg.paths.checkpoint).display()
            );
            if let Some(v) = outcome.best_val {
                println!("best validation loss {v:.4}");
            }
        }
        ModelCmd::Perplexity { input, checkpoint } => {
            let ckpt = load_ckpt(&checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()))?;
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            ckpt.expect_vocab(tok.vocab_size())?;
            let path = input.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            let corpus = read_clean_corpus(&path)?;
            let stream = corpus_stream(&corpus, &tok);
            let ppl = perplexity(
                &ckpt.config,
                &ckpt.params,
                &stream,
                cfg.train.eval_batch_size,
            )?;
            println!("perplexity: {ppl:.4}");
        }
        ModelCmd::Generate {
            prompt,
            strategy,
            max_new,
            temperature,
            top_k,
            seed,
            checkpoint,
        } => {
            if let Some(s) = strategy {
                cfg.generate.strategy = s;
            }
            if let Some(n) = max_new {
                cfg.generate.max_new_tokens = n;
            }
            if let Some(t) = temperature {
                cfg.generate.temperature = t;
            }
            if let Some(k) = top_k {
                cfg.generate.top_k = k;
            }
            let ckpt = load_ckpt(&checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()))?;
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            ckpt.expect_vocab(tok.vocab_size())?;
            let opts = cfg.generate.to_options();
            let seed = resolve_seed(seed, cfg.generate.seed, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prompt_ids = tok.encode(&prompt);
            let out = generate(&ckpt.config, &ckpt.params, &prompt_ids, &opts, &mut rng)?;
            println!("{}", tok.decode(&out)?);
        }
    }
    Ok(())
}

/// Loads the QA dataset and reproduces the configured split. Fine-tuning
/// and evaluation both go through here, so the test split stays disjoint
/// from training across separate invocations.
fn load_split(cfg: &PipelineConfig, dataset: &Path, seed: u64) -> anyhow::Result<DatasetSplit> {
    let loaded = load_qa(dataset)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    let r = cfg.qa.ratios;
    Ok(split_qa(&loaded.pairs, (r[0], r[1], r[2]), seed)?)
}

fn run_qa(cmd: QaCmd, mut cfg: PipelineConfig) -> anyhow::Result<()> {
    let template = PromptTemplate::default();
    match cmd {
        QaCmd::Split {
            ratios,
            dataset,
            seed,
        } => {
            if let Some((a, b, c)) = ratios {
                cfg.qa.ratios = [a, b, c];
            }
            if let Some(s) = seed {
                cfg.qa.seed = Some(s);
            }
            let dataset = dataset.unwrap_or_else(|| cfg.paths.qa_dataset.clone());
            let split_seed = resolve_seed(None, cfg.qa.seed, cfg.seed);
            let split = load_split(&cfg, &dataset, split_seed)?;
            let dir = cfg.output_dir.join("qa-split");
            fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_split_manifest(&dir, &split)?;
            echo_config(&cfg, &cfg.output_dir)?;
            println!(
                "split {} pairs into {}/{}/{} (train/validation/test); manifest in {}",
                split.train.len() + split.validation.len() + split.test.len(),
                split.train.len(),
                split.validation.len(),
                split.test.len(),
                dir.display()
            );
        }
        QaCmd::Finetune {
            preset,
            epochs,
            dataset,
            seed,
        } => {
            if let Some(p) = preset {
                cfg.finetune.preset = p;
            }
            if let Some(e) = epochs {
                cfg.finetune.epochs = Some(e);
            }
            if let Some(s) = seed {
                cfg.finetune.seed = Some(s);
            }
            let dataset = dataset.unwrap_or_else(|| cfg.paths.qa_dataset.clone());
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            let ckpt = load_ckpt(&cfg.paths.checkpoint)?;
            let split_seed = resolve_seed(None, cfg.qa.seed, cfg.seed);
            let split = load_split(&cfg, &dataset, split_seed)?;
            let fc = cfg.finetune.to_finetune_config(cfg.seed);
            echo_config(&cfg, &cfg.output_dir)?;
            let started = Instant::now();
            let outcome = finetune(ckpt, &tok, &template, &split, &fc)?;
            let mut log = String::new();
            for m in &outcome.last.history {
                log.push_str(&metrics_line(m, started.elapsed().as_secs_f64()));
                log.push('\n');
                print_epoch(m);
            }
            write_text(&cfg.output_dir.join("finetune-metrics.jsonl"), &log)?;
            save_ckpt(&outcome.last, &cfg.paths.finetuned_checkpoint)?;
            save_ckpt(&outcome.best, &best_path(&cfg.paths.finetuned_checkpoint))?;
            println!(
                "fine-tuned checkpoint written to {}",
                cfg.paths.finetuned_checkpoint.display()
            );
        }
        QaCmd::Ask {
            question,
            seed,
            checkpoint,
            max_new,
        } => {
            if let Some(n) = max_new {
                cfg.generate.max_new_tokens = n;
            }
            let path = checkpoint.unwrap_or_else(|| cfg.paths.finetuned_checkpoint.clone());
            let ckpt = load_ckpt(&path)?;
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            ckpt.expect_vocab(tok.vocab_size())?;
            let opts = cfg.generate.to_options();
            let seed = resolve_seed(seed, cfg.generate.seed, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            println!("{}", answer(&ckpt, &tok, &template, &question, &opts, &mut rng)?);
        }
        QaCmd::Chat { seed, checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.paths.finetuned_checkpoint.clone());
            let ckpt = load_ckpt(&path)?;
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            ckpt.expect_vocab(tok.vocab_size())?;
            let opts = cfg.generate.to_options();
            let seed = resolve_seed(seed, cfg.generate.seed, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                let question = line.context("cannot read standard input")?;
                if question.trim().is_empty() {
                    continue;
                }
                println!("{}", answer(&ckpt, &tok, &template, &question, &opts, &mut rng)?);
            }
        }
    }
    Ok(())
}

fn run_eval(cmd: EvalCmd, mut cfg: PipelineConfig) -> anyhow::Result<()> {
    let template = PromptTemplate::default();
    match cmd {
        EvalCmd::Rouge {
            candidate,
            reference,
        } => {
            let cand = fs::read_to_string(&candidate)
                .with_context(|| format!("cannot read {}", candidate.display()))?;
            let reference_text = fs::read_to_string(&reference)
                .with_context(|| format!("cannot read {}", reference.display()))?;
            print!("{}", RougeReport::of_texts(&cand, &reference_text).to_text());
        }
        EvalCmd::Completion {
            k,
            input,
            checkpoint,
            seed,
        } => {
            let ckpt = load_ckpt(&checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()))?;
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            let path = input.unwrap_or_else(|| cfg.paths.clean_corpus.clone());
            let text = fs::read_to_string(&path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let sentences = segment_sentences(&text);
            if let Some(s) = seed {
                cfg.generate.seed = Some(s);
            }
            let opts = cfg.generate.to_options();
            let seed = resolve_seed(None, cfg.generate.seed, cfg.seed);
            let eval = sentence_completion_eval(&ckpt, &tok, &sentences, k, &opts, seed)?;
            for warning in &eval.warnings {
                eprintln!("warning: {warning}");
            }
            let report = eval.to_text_report();
            echo_config(&cfg, &cfg.output_dir)?;
            write_text(&cfg.output_dir.join("completion-eval.txt"), &report)?;
            print!("{report}");
        }
        EvalCmd::Qa {
            n,
            dataset,
            checkpoint,
            seed,
        } => {
            let path = checkpoint.unwrap_or_else(|| cfg.paths.finetuned_checkpoint.clone());
            let ckpt = load_ckpt(&path)?;
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            let dataset = dataset.unwrap_or_else(|| cfg.paths.qa_dataset.clone());
            let split_seed = resolve_seed(None, cfg.qa.seed, cfg.seed);
            let split = load_split(&cfg, &dataset, split_seed)?;
            if let Some(s) = seed {
                cfg.generate.seed = Some(s);
            }
            let opts = cfg.generate.to_options();
            let seed = resolve_seed(None, cfg.generate.seed, cfg.seed);
            let eval = evaluate_qa(&ckpt, &tok, &template, &split.test, n, &opts, seed)?;
            for warning in &eval.warnings {
                eprintln!("warning: {warning}");
            }
            let report = eval.to_text_report();
            echo_config(&cfg, &cfg.output_dir)?;
            write_text(&cfg.output_dir.join("qa-eval.txt"), &report)?;
            print!("{report}");
        }
        EvalCmd::Annotate(AnnotateCmd::Export {
            n,
            dataset,
            checkpoint,
            seed,
            out_file,
        }) => {
            let path = checkpoint.unwrap_or_else(|| cfg.paths.finetuned_checkpoint.clone());
            let ckpt = load_ckpt(&path)?;
            let tok = load_tokenizer(&cfg.paths.tokenizer)?;
            ckpt.expect_vocab(tok.vocab_size())?;
            let dataset = dataset.unwrap_or_else(|| cfg.paths.qa_dataset.clone());
            let split_seed = resolve_seed(None, cfg.qa.seed, cfg.seed);
            let split = load_split(&cfg, &dataset, split_seed)?;
            if split.test.is_empty() {
                return Err(usage("test split is empty; nothing to annotate"));
            }
            if split.test.len() < n {
                eprintln!(
                    "warning: test split has {} pairs, fewer than the requested {n}; \
                     exporting all",
                    split.test.len()
                );
            }
            if let Some(s) = seed {
                cfg.generate.seed = Some(s);
            }
            let opts = cfg.generate.to_options();
            let seed = resolve_seed(None, cfg.generate.seed, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = Vec::new();
            for (i, pair) in split.test.iter().take(n).enumerate() {
                let generation = answer(&ckpt, &tok, &template, &pair.question, &opts, &mut rng)?;
                samples.push((format!("s{i}"), pair.question.clone(), generation));
            }
            let out_path =
                out_file.unwrap_or_else(|| cfg.output_dir.join("annotation-sheet.csv"));
            if let Some(parent) = out_path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)
                        .with_context(|| format!("cannot create {}", parent.display()))?;
                }
            }
            export_annotation_sheet(&samples, &out_path)?;
            echo_config(&cfg, &cfg.output_dir)?;
            println!(
                "annotation sheet with {} samples written to {}",
                samples.len(),
                out_path.display()
            );
        }
        EvalCmd::Annotate(AnnotateCmd::Score { sheets, majority }) => {
            if sheets.is_empty() {
                return Err(usage("no annotation sheets given"));
            }
            let mut records = Vec::new();
            for sheet in &sheets {
                let annotator = sheet
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("annotator");
                records.extend(parse_annotation_sheet(sheet, annotator)?);
            }
            let report = if majority {
                score_annotations_majority(&records)?
            } else {
                score_annotations(&records)?
            };
            let text = report.to_text();
            echo_config(&cfg, &cfg.output_dir)?;
            write_text(&cfg.output_dir.join("human-eval.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}
