//! Question answering: dataset loading, splitting, prompt formatting,
//! fine-tuning, and answering.
//!
//! A QA example is rendered as
//!
//! ```text
//! प्रश्न: {question}
//! उत्तर: {answer}
//! ```
//!
//! followed by the eos token. Fine-tuning continues causal LM training on
//! these renderings with fresh optimizer state, a linear learning rate
//! warmup, and decoupled weight decay.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CleaningPolicy;
use crate::model::{
    adam_step_with_lr, generate, loss_and_grads, masked_cross_entropy, AdamState, Checkpoint,
    EpochMetrics, Float, Forward, GenerateOptions, Mode, ModelError, RngState, TrainConfig,
    TrainOutcome,
};
use crate::tokenizer::{TokenizerError, TokenizerModel, EOS_ID, PAD_ID};

pub const DEFAULT_QUESTION_PREFIX: &str = "प्रश्न: ";
pub const DEFAULT_ANSWER_PREFIX: &str = "उत्तर: ";

#[derive(Debug, Error)]
pub enum QaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a JSON array of question-answer records: {reason}")]
    MalformedJson { path: PathBuf, reason: String },
    #[error("record {index}: not a JSON object")]
    RecordNotObject { index: usize },
    #[error("record {index}: missing field \"{field}\"")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: field \"{field}\" is not a string")]
    FieldNotString { index: usize, field: &'static str },
    #[error("record {index}: field \"{field}\" is empty after trimming")]
    EmptyField { index: usize, field: &'static str },
    #[error(
        "record {index}: field \"{field}\" contains the template prefix {prefix:?}, \
         which would make prompts ambiguous"
    )]
    TemplateCollision {
        index: usize,
        field: &'static str,
        prefix: String,
    },
    #[error("need at least 3 pairs to split, got {found}")]
    TooFewPairs { found: usize },
    #[error("split ratios must sum to 1, got {sum}")]
    BadRatios { sum: f64 },
    #[error(
        "question of {tokens} tokens leaves no room for an answer under max_length {max}"
    )]
    QuestionTooLong { tokens: usize, max: usize },
    #[error("max_length {max_length} exceeds the model context of {context_len}")]
    MaxLengthExceedsContext {
        max_length: usize,
        context_len: usize,
    },
    #[error("fine-tuning needs at least one training pair")]
    EmptyTrainSplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// One question-answer record. `source` is free-form provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// Loaded dataset plus non-fatal per-record observations (for example
/// records that are mostly non-Devanagari).
#[derive(Debug, Clone)]
pub struct LoadedQa {
    pub pairs: Vec<QAPair>,
    pub warnings: Vec<String>,
}

/// How questions and answers are rendered into LM text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub question_prefix: String,
    pub answer_prefix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            question_prefix: DEFAULT_QUESTION_PREFIX.to_string(),
            answer_prefix: DEFAULT_ANSWER_PREFIX.to_string(),
        }
    }
}

impl PromptTemplate {
    /// Full training rendering, without the trailing eos token (the eos is
    /// appended as a token id, not as text).
    pub fn render_full(&self, pair: &QAPair) -> String {
        format!(
            "{}{}\n{}{}",
            self.question_prefix, pair.question, self.answer_prefix, pair.answer
        )
    }

    /// Inference rendering: the answer slot is left open for the model.
    pub fn render_prompt(&self, question: &str) -> String {
        format!("{}{}\n{}", self.question_prefix, question, self.answer_prefix)
    }

    /// Rendering is only injective when neither prefix appears inside the
    /// data itself; prefixes are compared without trailing whitespace so a
    /// collision cannot hide behind spacing.
    pub fn validate_pair(&self, index: usize, pair: &QAPair) -> Result<(), QaError> {
        for (field, text) in [("question", &pair.question), ("answer", &pair.answer)] {
            for prefix in [&self.question_prefix, &self.answer_prefix] {
                let needle = prefix.trim_end();
                if !needle.is_empty() && text.contains(needle) {
                    return Err(QaError::TemplateCollision {
                        index,
                        field,
                        prefix: prefix.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Fine-tuning hyperparameters. [`FinetuneConfig::recommended`] is the
/// default; [`FinetuneConfig::published`] preserves the published learning
/// rate of 0.01, which tends to diverge on full transformers and is kept
/// only so the original recipe stays runnable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub max_length: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of total optimizer steps spent in linear warmup; the rate
    /// then stays constant.
    pub warmup_ratio: f64,
    pub train_batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Score only answer tokens (and eos) instead of the whole rendering.
    pub answer_only_loss: bool,
}

impl FinetuneConfig {
    pub fn recommended() -> Self {
        FinetuneConfig {
            max_length: 150,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            warmup_ratio: 0.01,
            train_batch_size: 8,
            eval_batch_size: 8,
            epochs: 10,
            seed: 42,
            answer_only_loss: false,
        }
    }

    pub fn published() -> Self {
        FinetuneConfig {
            learning_rate: 0.01,
            ..Self::recommended()
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::recommended()
    }
}

/// A train/validation/test partition plus the original record indices of
/// each side, so the split can be audited and re-created.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<QAPair>,
    pub validation: Vec<QAPair>,
    pub test: Vec<QAPair>,
    pub train_ids: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
}

/// Reads a QA dataset: a JSON array of objects with string fields
/// "question" and "answer" (optional "source"). Errors carry the first
/// offending record's index; mostly non-Devanagari records produce
/// warnings rather than errors. Records that contain the default template
/// prefixes are rejected because they would make prompt parsing ambiguous.
pub fn load_qa(path: &Path) -> Result<LoadedQa, QaError> {
    let text = std::fs::read_to_string(path).map_err(|source| QaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| QaError::MalformedJson {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let records = value.as_array().ok_or_else(|| QaError::MalformedJson {
        path: path.to_path_buf(),
        reason: "top-level value is not an array".to_string(),
    })?;

    let template = PromptTemplate::default();
    let policy = CleaningPolicy::default();
    let mut pairs = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for (index, record) in records.iter().enumerate() {
        let obj = record
            .as_object()
            .ok_or(QaError::RecordNotObject { index })?;
        let field_of = |field: &'static str| -> Result<String, QaError> {
            let v = obj
                .get(field)
                .ok_or(QaError::MissingField { index, field })?;
            let s = v
                .as_str()
                .ok_or(QaError::FieldNotString { index, field })?;
            let trimmed = s.trim();
            if trimmed.is_empty() {
                return Err(QaError::EmptyField { index, field });
            }
            Ok(trimmed.to_string())
        };
        let question = field_of("question")?;
        let answer = field_of("answer")?;
        let source = match obj.get("source") {
            Some(serde_json::Value::String(s)) => Some(s.trim().to_string()),
            _ => None,
        };
        let pair = QAPair { question, answer, source };
        template.validate_pair(index, &pair)?;
        let all_chars = pair.question.chars().chain(pair.answer.chars());
        let (mut total, mut allowed) = (0usize, 0usize);
        for c in all_chars.filter(|c| !c.is_whitespace()) {
            total += 1;
            if policy.allows(c) {
                allowed += 1;
            }
        }
        if allowed * 2 < total {
            warnings.push(format!(
                "record {index}: mostly non-Devanagari text ({allowed}/{total} characters in script)"
            ));
        }
        pairs.push(pair);
    }
    Ok(LoadedQa { pairs, warnings })
}

/// Seeded shuffle followed by contiguous slicing into train, validation,
/// and test. Validation and test sizes are floored; the remainder goes to
/// train, so 10 pairs at 0.8/0.1/0.1 split 8/1/1.
pub fn split_qa(
    pairs: &[QAPair],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, QaError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(QaError::BadRatios { sum });
    }
    let n = pairs.len();
    if n < 3 {
        return Err(QaError::TooFewPairs { found: n });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = (n as f64 * ratios.1).floor() as usize;
    let n_test = (n as f64 * ratios.2).floor() as usize;
    let n_train = n - n_val - n_test;
    let train_ids = ids[..n_train].to_vec();
    let validation_ids = ids[n_train..n_train + n_val].to_vec();
    let test_ids = ids[n_train + n_val..].to_vec();
    let collect = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect();
    Ok(DatasetSplit {
        train: collect(&train_ids),
        validation: collect(&validation_ids),
        test: collect(&test_ids),
        train_ids,
        validation_ids,
        test_ids,
        seed,
    })
}

/// Writes the split as three id-list files (one original record index per
/// line) plus the seed, making the partition auditable without the data.
pub fn write_split_manifest(dir: &Path, split: &DatasetSplit) -> Result<(), QaError> {
    let write = |name: &str, body: String| -> Result<(), QaError> {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| QaError::Io { path, source })
    };
    let id_list = |ids: &[usize]| {
        let mut s = ids
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        s.push('\n');
        s
    };
    write("train_ids.txt", id_list(&split.train_ids))?;
    write("validation_ids.txt", id_list(&split.validation_ids))?;
    write("test_ids.txt", id_list(&split.test_ids))?;
    write("split_seed.txt", format!("{}\n", split.seed))
}

/// A tokenized training example. `loss_mask[i]` says whether `ids[i]`
/// counts as a scored prediction target; `ids[..prompt_len]` is exactly
/// the encoding of the prompt rendering (question plus empty answer slot).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormattedExample {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub prompt_len: usize,
}

/// Renders and tokenizes one pair: full rendering, eos id appended, then
/// right truncation to `max_length`. The question is never truncated; a
/// question leaving no room for answer tokens is an error.
///
/// With `answer_only` the mask covers only answer tokens and the eos;
/// otherwise every position is scored (full-sequence objective).
pub fn format_example(
    pair: &QAPair,
    template: &PromptTemplate,
    tokenizer: &TokenizerModel,
    max_length: usize,
    answer_only: bool,
) -> Result<FormattedExample, QaError> {
    let prompt_ids = tokenizer.encode(&template.render_prompt(&pair.question));
    if prompt_ids.len() >= max_length {
        return Err(QaError::QuestionTooLong {
            tokens: prompt_ids.len(),
            max: max_length,
        });
    }
    let mut ids = tokenizer.encode(&template.render_full(pair));
    debug_assert_eq!(&ids[..prompt_ids.len()], &prompt_ids[..]);
    ids.push(EOS_ID);
    ids.truncate(max_length);
    let prompt_len = prompt_ids.len();
    let loss_mask = (0..ids.len())
        .map(|i| !answer_only || i >= prompt_len)
        .collect();
    Ok(FormattedExample {
        ids,
        loss_mask,
        prompt_len,
    })
}

/// Right-pads a batch of examples to a common length and lays out the
/// next-token `(inputs, targets, target mask, time steps)` tuple. Padding
/// positions are excluded from the loss by the mask.
fn collate(examples: &[&FormattedExample]) -> (Vec<u32>, Vec<u32>, Vec<bool>, usize) {
    let max_len = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let t = max_len - 1;
    let b = examples.len();
    let mut inputs = Vec::with_capacity(b * t);
    let mut targets = Vec::with_capacity(b * t);
    let mut mask = Vec::with_capacity(b * t);
    for e in examples {
        for i in 0..t {
            inputs.push(*e.ids.get(i).unwrap_or(&PAD_ID));
            targets.push(*e.ids.get(i + 1).unwrap_or(&PAD_ID));
            mask.push(i + 1 < e.ids.len() && e.loss_mask[i + 1]);
        }
    }
    (inputs, targets, mask, t)
}

fn format_all(
    pairs: &[QAPair],
    template: &PromptTemplate,
    tokenizer: &TokenizerModel,
    fc: &FinetuneConfig,
) -> Result<Vec<FormattedExample>, QaError> {
    pairs
        .iter()
        .map(|p| format_example(p, template, tokenizer, fc.max_length, fc.answer_only_loss))
        .collect()
}

fn eval_split_loss<T: Float>(
    ckpt_config: &crate::model::ModelConfig,
    params: &crate::model::Parameters<T>,
    examples: &[FormattedExample],
    batch_size: usize,
) -> Result<Option<f64>, QaError> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&FormattedExample> = chunk.iter().collect();
        let (inputs, targets, mask, t) = collate(&refs);
        let fwd: Forward<T> = crate::model::forward(
            ckpt_config,
            params,
            &inputs,
            chunk.len(),
            t,
            Mode::Eval,
            None,
        )?;
        let loss = masked_cross_entropy(&fwd.logits, ckpt_config.vocab_size, &targets, &mask)?;
        let scored = mask.iter().filter(|&&m| m).count();
        total += loss.to_f64() * scored as f64;
        count += scored;
    }
    Ok(Some(total / count as f64))
}

/// Fine-tunes a pretrained checkpoint on the split's training pairs.
///
/// Every parameter is trainable. The optimizer restarts from zeroed Adam
/// state with a linear warmup over `warmup_ratio` of the total steps,
/// then a constant rate, with decoupled weight decay throughout. Returns
/// last and best-validation states; the returned history covers only the
/// fine-tuning epochs.
pub fn finetune<T: Float>(
    ckpt: Checkpoint<T>,
    tokenizer: &TokenizerModel,
    template: &PromptTemplate,
    split: &DatasetSplit,
    fc: &FinetuneConfig,
) -> Result<TrainOutcome<T>, QaError> {
    let cfg = ckpt.config;
    cfg.validate()?;
    ckpt.expect_vocab(tokenizer.vocab_size())?;
    if fc.max_length > cfg.context_len {
        return Err(QaError::MaxLengthExceedsContext {
            max_length: fc.max_length,
            context_len: cfg.context_len,
        });
    }
    if split.train.is_empty() {
        return Err(QaError::EmptyTrainSplit);
    }
    let train_examples = format_all(&split.train, template, tokenizer, fc)?;
    let val_examples = format_all(&split.validation, template, tokenizer, fc)?;

    let mut params = ckpt.params;
    let mut opt = AdamState::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
    let mut history: Vec<EpochMetrics> = Vec::new();

    let tc = TrainConfig {
        learning_rate: fc.learning_rate,
        train_batch_size: fc.train_batch_size,
        eval_batch_size: fc.eval_batch_size,
        epochs: fc.epochs,
        seed: fc.seed,
        weight_decay: fc.weight_decay,
        ..TrainConfig::default()
    };
    let batches_per_epoch = train_examples.len().div_ceil(fc.train_batch_size.max(1));
    let total_steps = batches_per_epoch * fc.epochs;
    let warmup_steps = if fc.warmup_ratio > 0.0 {
        ((total_steps as f64 * fc.warmup_ratio).ceil() as u64).max(1)
    } else {
        0
    };

    let mut best_val = f64::INFINITY;
    let mut best: Option<Checkpoint<T>> = None;
    for epoch in 0..fc.epochs {
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        order.shuffle(&mut rng);
        let mut total_nll = 0.0f64;
        let mut scored = 0usize;
        for chunk in order.chunks(fc.train_batch_size.max(1)) {
            let refs: Vec<&FormattedExample> =
                chunk.iter().map(|&i| &train_examples[i]).collect();
            let (inputs, targets, mask, t) = collate(&refs);
            let (loss, grads) = loss_and_grads(
                &cfg,
                &params,
                &inputs,
                chunk.len(),
                t,
                &targets,
                Some(&mask),
                Mode::Train,
                Some(&mut rng),
            )?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(
                    ModelError::NonFiniteLoss { step: opt.step + 1 }.into()
                );
            }
            opt.step += 1;
            let lr = if warmup_steps > 0 && opt.step <= warmup_steps {
                fc.learning_rate * opt.step as f64 / warmup_steps as f64
            } else {
                fc.learning_rate
            };
            adam_step_with_lr(&mut params, &grads, &mut opt, &tc, T::from_f64(lr));
            let n = mask.iter().filter(|&&m| m).count();
            total_nll += loss * n as f64;
            scored += n;
        }
        let train_loss = total_nll / scored as f64;
        let val_loss = eval_split_loss(&cfg, &params, &val_examples, fc.eval_batch_size)?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            step: opt.step,
            train_loss,
            train_ppl: train_loss.exp(),
            val_loss,
            val_ppl: val_loss.map(f64::exp),
        };
        history.push(metrics);
        if let Some(vl) = val_loss {
            if vl < best_val {
                best_val = vl;
                best = Some(Checkpoint {
                    config: cfg,
                    rng: RngState::capture(&rng),
                    params: params.clone(),
                    opt: opt.clone(),
                    history: history.clone(),
                });
            }
        }
    }
    let last = Checkpoint {
        config: cfg,
        rng: RngState::capture(&rng),
        params,
        opt,
        history,
    };
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        last,
        best,
        best_val: best_val.is_finite().then_some(best_val),
    })
}

/// Renders `question` with an open answer slot, decodes until eos, and
/// returns the answer text. Template prefixes never appear in the output:
/// a regurgitated answer prefix is stripped, and generation is cut at any
/// attempt to start a new question.
pub fn answer<T: Float>(
    ckpt: &Checkpoint<T>,
    tokenizer: &TokenizerModel,
    template: &PromptTemplate,
    question: &str,
    opts: &GenerateOptions,
    rng: &mut ChaCha8Rng,
) -> Result<String, QaError> {
    let prompt = template.render_prompt(question.trim());
    let prompt_ids = tokenizer.encode(&prompt);
    let generated = generate(&ckpt.config, &ckpt.params, &prompt_ids, opts, rng)?;
    let mut text = tokenizer.decode(&generated)?;
    // A model that regurgitates the answer prefix gets it stripped; any
    // later prefix marks the start of a hallucinated next turn and cuts
    // the answer there.
    let a_marker = template.answer_prefix.trim_end();
    if !a_marker.is_empty() {
        if let Some(stripped) = text.trim_start().strip_prefix(a_marker) {
            text = stripped.to_string();
        }
    }
    for marker in [template.question_prefix.trim_end(), a_marker] {
        if marker.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(marker) {
            text.truncate(pos);
        }
    }
    Ok(text.trim().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CleanCorpus;
    use crate::model::{init_params, ModelConfig, SamplingStrategy};
    use crate::tokenizer::{train_bpe, TrainParams};

    fn sample_pairs() -> Vec<QAPair> {
        (0..10)
            .map(|i| QAPair {
                question: format!("नेपालको {i} के हो?"),
                answer: format!("उत्तर{i} हो।"),
                source: None,
            })
            .collect()
    }

    fn fixture_tokenizer(pairs: &[QAPair], template: &PromptTemplate) -> TokenizerModel {
        let lines: Vec<String> = pairs.iter().map(|p| template.render_full(p)).collect();
        let corpus = CleanCorpus::from_lines(lines, "qa-fixture");
        train_bpe(
            &corpus,
            &TrainParams { target_vocab: 400, ..TrainParams::default() },
        )
        .unwrap()
    }

    #[test]
    fn load_round_trips_the_documented_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.json");
        std::fs::write(
            &path,
            r#"[{"question":"नेपालको राजधानी कहाँ हो?","answer":"काठमाडौं"}]"#,
        )
        .unwrap();
        let loaded = load_qa(&path).unwrap();
        assert_eq!(loaded.pairs.len(), 1);
        assert_eq!(loaded.pairs[0].question, "नेपालको राजधानी कहाँ हो?");
        assert_eq!(loaded.pairs[0].answer, "काठमाडौं");
        assert!(loaded.pairs[0].source.is_none());
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn empty_array_loads_as_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.json");
        std::fs::write(&path, "[]").unwrap();
        let loaded = load_qa(&path).unwrap();
        assert!(loaded.pairs.is_empty());
    }

    #[test]
    fn missing_and_empty_fields_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.json");
        std::fs::write(&path, r#"[{"question":"के हो?"}]"#).unwrap();
        assert!(matches!(
            load_qa(&path),
            Err(QaError::MissingField { index: 0, field: "answer" })
        ));
        std::fs::write(
            &path,
            r#"[{"question":"के हो?","answer":"ठीक"},{"question":"  ","answer":"ठीक"}]"#,
        )
        .unwrap();
        assert!(matches!(
            load_qa(&path),
            Err(QaError::EmptyField { index: 1, field: "question" })
        ));
        std::fs::write(&path, r#"[{"question":"के हो?","answer":42}]"#).unwrap();
        assert!(matches!(
            load_qa(&path),
            Err(QaError::FieldNotString { index: 0, field: "answer" })
        ));
    }

    #[test]
    fn mostly_latin_records_warn_but_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.json");
        std::fs::write(
            &path,
            r#"[{"question":"what is the capital?","answer":"kathmandu"}]"#,
        )
        .unwrap();
        let loaded = load_qa(&path).unwrap();
        assert_eq!(loaded.pairs.len(), 1);
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("record 0"));
    }

    #[test]
    fn template_prefix_inside_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.json");
        std::fs::write(
            &path,
            r#"[{"question":"के हो?","answer":"प्रश्न: अर्को"}]"#,
        )
        .unwrap();
        assert!(matches!(
            load_qa(&path),
            Err(QaError::TemplateCollision { index: 0, field: "answer", .. })
        ));
    }

    #[test]
    fn ten_pairs_split_eight_one_one_and_partition() {
        let pairs = sample_pairs();
        let split = split_qa(&pairs, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.test.len(), 1);
        let again = split_qa(&pairs, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(split, again);
        let mut all_ids: Vec<usize> = split
            .train_ids
            .iter()
            .chain(&split.validation_ids)
            .chain(&split.test_ids)
            .copied()
            .collect();
        all_ids.sort_unstable();
        assert_eq!(all_ids, (0..10).collect::<Vec<_>>());
        // Test ids never leak into train.
        assert!(split.test_ids.iter().all(|id| !split.train_ids.contains(id)));
    }

    #[test]
    fn split_guards_inputs() {
        let pairs = sample_pairs();
        assert!(matches!(
            split_qa(&pairs[..2], (0.8, 0.1, 0.1), 1),
            Err(QaError::TooFewPairs { found: 2 })
        ));
        assert!(matches!(
            split_qa(&pairs, (0.5, 0.1, 0.1), 1),
            Err(QaError::BadRatios { .. })
        ));
    }

    #[test]
    fn manifest_lists_ids_and_seed() {
        let pairs = sample_pairs();
        let split = split_qa(&pairs, (0.8, 0.1, 0.1), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split_manifest(dir.path(), &split).unwrap();
        let train = std::fs::read_to_string(dir.path().join("train_ids.txt")).unwrap();
        assert_eq!(train.lines().count(), 8);
        let seed = std::fs::read_to_string(dir.path().join("split_seed.txt")).unwrap();
        assert_eq!(seed.trim(), "3");
    }

    #[test]
    fn formatting_appends_eos_and_round_trips_modulo_whitespace() {
        let template = PromptTemplate::default();
        let pairs = sample_pairs();
        let tok = fixture_tokenizer(&pairs, &template);
        let ex = format_example(&pairs[0], &template, &tok, 150, false).unwrap();
        assert_eq!(*ex.ids.last().unwrap(), EOS_ID);
        assert!(ex.loss_mask.iter().all(|&m| m));
        // The rendering survives a decode except that the newline
        // separator comes back as the single space the marker scheme
        // encodes all whitespace as.
        let decoded = tok.decode(&ex.ids[..ex.ids.len() - 1]).unwrap();
        let rendered = template.render_full(&pairs[0]);
        let normalized: Vec<&str> = rendered.split_whitespace().collect();
        assert_eq!(decoded, normalized.join(" "));
        // Prompt prefix property: the first prompt_len ids are exactly the
        // encoding of the open-slot prompt.
        let prompt_ids = tok.encode(&template.render_prompt(&pairs[0].question));
        assert_eq!(&ex.ids[..ex.prompt_len], &prompt_ids[..]);
    }

    #[test]
    fn answer_only_masking_skips_prompt_positions() {
        let template = PromptTemplate::default();
        let pairs = sample_pairs();
        let tok = fixture_tokenizer(&pairs, &template);
        let ex = format_example(&pairs[0], &template, &tok, 150, true).unwrap();
        assert!(ex.loss_mask[..ex.prompt_len].iter().all(|&m| !m));
        assert!(ex.loss_mask[ex.prompt_len..].iter().all(|&m| m));
        assert!(ex.ids.len() > ex.prompt_len);
    }

    #[test]
    fn oversized_questions_are_unanswerable() {
        let template = PromptTemplate::default();
        let pairs = sample_pairs();
        let tok = fixture_tokenizer(&pairs, &template);
        let err = format_example(&pairs[0], &template, &tok, 3, false).unwrap_err();
        assert!(matches!(err, QaError::QuestionTooLong { max: 3, .. }));
    }

    fn tiny_setup() -> (ModelConfig, TokenizerModel, PromptTemplate, DatasetSplit) {
        let template = PromptTemplate::default();
        let pairs = sample_pairs();
        let tok = fixture_tokenizer(&pairs, &template);
        let split = split_qa(&pairs, (0.8, 0.1, 0.1), 5).unwrap();
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            context_len: 64,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            dropout: 0.0,
            init_std: 0.02,
        };
        (cfg, tok, template, split)
    }

    fn fresh_checkpoint(cfg: &ModelConfig) -> Checkpoint<f32> {
        Checkpoint {
            config: *cfg,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            params: init_params::<f32>(cfg, 11).unwrap(),
            opt: AdamState::new(cfg),
            history: Vec::new(),
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let (cfg, tok, template, split) = tiny_setup();
        let ckpt = fresh_checkpoint(&cfg);
        let before = ckpt.params.clone();
        let fc = FinetuneConfig {
            learning_rate: 0.0,
            epochs: 2,
            max_length: 32,
            ..FinetuneConfig::recommended()
        };
        let out = finetune(ckpt, &tok, &template, &split, &fc).unwrap();
        assert_eq!(out.last.params, before);
    }

    #[test]
    fn finetune_emits_one_record_per_epoch_and_tracks_best() {
        let (cfg, tok, template, split) = tiny_setup();
        let ckpt = fresh_checkpoint(&cfg);
        let fc = FinetuneConfig {
            learning_rate: 1e-3,
            epochs: 4,
            max_length: 32,
            train_batch_size: 4,
            ..FinetuneConfig::recommended()
        };
        let out = finetune(ckpt, &tok, &template, &split, &fc).unwrap();
        assert_eq!(out.last.history.len(), 4);
        let min_val = out
            .last
            .history
            .iter()
            .filter_map(|m| m.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val, Some(min_val));
        assert_eq!(
            out.best.history.last().unwrap().val_loss,
            Some(min_val),
            "best checkpoint is the state right after its epoch"
        );
    }

    #[test]
    fn one_step_touches_every_tensor() {
        let (cfg, tok, template, split) = tiny_setup();
        let ckpt = fresh_checkpoint(&cfg);
        let before = ckpt.params.clone();
        let fc = FinetuneConfig {
            learning_rate: 1e-3,
            epochs: 1,
            max_length: 32,
            train_batch_size: 16,
            ..FinetuneConfig::recommended()
        };
        let out = finetune(ckpt, &tok, &template, &split, &fc).unwrap();
        let descs = cfg.tensor_descs();
        for ((b, a), d) in before
            .tensors()
            .iter()
            .zip(out.last.params.tensors())
            .zip(&descs)
        {
            assert_ne!(*b, a, "tensor {} never moved", d.name);
        }
    }

    #[test]
    fn finetune_rejects_max_length_beyond_context() {
        let (cfg, tok, template, split) = tiny_setup();
        let ckpt = fresh_checkpoint(&cfg);
        let fc = FinetuneConfig { max_length: 65, ..FinetuneConfig::recommended() };
        assert!(matches!(
            finetune(ckpt, &tok, &template, &split, &fc),
            Err(QaError::MaxLengthExceedsContext { max_length: 65, context_len: 64 })
        ));
    }

    #[test]
    fn finetune_rejects_vocab_mismatch() {
        let (cfg, tok, template, split) = tiny_setup();
        let mut other = cfg;
        other.vocab_size = cfg.vocab_size + 1;
        let ckpt = fresh_checkpoint(&other);
        let fc = FinetuneConfig { max_length: 32, ..FinetuneConfig::recommended() };
        assert!(matches!(
            finetune(ckpt, &tok, &template, &split, &fc),
            Err(QaError::Model(ModelError::VocabMismatch { .. }))
        ));
    }

    #[test]
    fn answer_returns_prefix_free_text_deterministically() {
        let (cfg, tok, template, _) = tiny_setup();
        let ckpt = fresh_checkpoint(&cfg);
        let opts = GenerateOptions {
            max_new_tokens: 8,
            strategy: SamplingStrategy::Greedy,
            ..GenerateOptions::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = answer(&ckpt, &tok, &template, "नेपालको 3 के हो?", &opts, &mut r1).unwrap();
        let b = answer(&ckpt, &tok, &template, "नेपालको 3 के हो?", &opts, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(template.question_prefix.trim_end()));
        assert!(!a.contains(template.answer_prefix.trim_end()));
    }
}
