//! Generation quality measurement: ROUGE-1/2/L, a sentence-completion
//! protocol, QA test-set scoring, and the annotation sheet round trip
//! for human coherence and consistency judgments.
//!
//! ROUGE here is word-level. Text is split with the corpus module's word
//! rule so scores stay comparable across the toolkit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::tokenize_words;
use crate::model::{generate, Checkpoint, Float, GenerateOptions, ModelError};
use crate::qa::{answer, PromptTemplate, QAPair, QaError};
use crate::tokenizer::{TokenizerError, TokenizerModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Sheet {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column \"{column}\"")]
    MissingColumn {
        path: PathBuf,
        column: &'static str,
    },
    #[error(
        "{path} row {row}: {value:?} is not a boolean label \
         (want 0/1, yes/no, or true/false)"
    )]
    BadLabel {
        path: PathBuf,
        row: usize,
        value: String,
    },
    #[error("annotator {annotator_id:?} judged sample {sample_id:?} twice")]
    DuplicateJudgment {
        sample_id: String,
        annotator_id: String,
    },
    #[error("no annotation records to score")]
    NoRecords,
    #[error("no samples to export")]
    NoSamples,
    #[error("no test pairs to evaluate")]
    EmptyTestSet,
    #[error("only {usable} usable sentences, need {needed}")]
    TooFewUsable { usable: usize, needed: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Qa(#[from] QaError),
}

/// Precision/recall/F1 for one ROUGE variant, each in [0, 1]. F1 is the
/// harmonic mean, defined as 0 when precision + recall = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_pr(precision: f64, recall: f64) -> RougeScore {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

fn ratio(numerator: u64, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0u64) += 1;
    }
    counts
}

/// ROUGE-N: clipped n-gram multiset overlap. Precision divides by the
/// candidate's n-gram count, recall by the reference's; a side shorter
/// than `n` has no n-grams and scores 0 on its ratio.
///
/// # Panics
/// When `n` is 0.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand_counts = ngram_counts(candidate, n);
    let ref_counts = ngram_counts(reference, n);
    let overlap: u64 = cand_counts
        .iter()
        .map(|(gram, &count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_pr(
        ratio(overlap, candidate.len().saturating_sub(n - 1)),
        ratio(overlap, reference.len().saturating_sub(n - 1)),
    )
}

/// Two-row longest-common-subsequence table. `row[0]` stays 0 and every
/// other cell is rewritten before it is read, so no clearing is needed
/// between rows.
fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(row[j])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

/// ROUGE-L: longest common subsequence length L, with precision L/|cand|
/// and recall L/|ref|.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    let l = lcs_len(candidate, reference) as u64;
    RougeScore::from_pr(ratio(l, candidate.len()), ratio(l, reference.len()))
}

/// The three conventional ROUGE variants for one candidate/reference
/// pair, or a macro average over many pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

impl RougeReport {
    pub const ZERO: RougeReport = RougeReport {
        rouge1: RougeScore::ZERO,
        rouge2: RougeScore::ZERO,
        rouge_l: RougeScore::ZERO,
    };

    /// Scores already-tokenized sequences.
    pub fn of_tokens<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeReport {
        RougeReport {
            rouge1: rouge_n(candidate, reference, 1),
            rouge2: rouge_n(candidate, reference, 2),
            rouge_l: rouge_l(candidate, reference),
        }
    }

    /// Scores plain text. Words come from the corpus tokenization rule,
    /// so edge punctuation is stripped the same way everywhere.
    pub fn of_texts(candidate: &str, reference: &str) -> RougeReport {
        let cand: Vec<&str> = tokenize_words(candidate).collect();
        let reference: Vec<&str> = tokenize_words(reference).collect();
        RougeReport::of_tokens(&cand, &reference)
    }

    /// Componentwise arithmetic mean; the macro-averaged F1 is the mean
    /// of per-item F1s, not the harmonic mean of the averaged ratios.
    /// Empty input gives all zeros.
    pub fn mean(items: &[RougeReport]) -> RougeReport {
        if items.is_empty() {
            return RougeReport::ZERO;
        }
        let n = items.len() as f64;
        let mut sum = [0.0f64; 9];
        for item in items {
            for (slot, value) in sum.iter_mut().zip(item.components()) {
                *slot += value;
            }
        }
        RougeReport::from_components(sum.map(|s| s / n))
    }

    fn components(&self) -> [f64; 9] {
        [
            self.rouge1.precision,
            self.rouge1.recall,
            self.rouge1.f1,
            self.rouge2.precision,
            self.rouge2.recall,
            self.rouge2.f1,
            self.rouge_l.precision,
            self.rouge_l.recall,
            self.rouge_l.f1,
        ]
    }

    fn from_components(c: [f64; 9]) -> RougeReport {
        RougeReport {
            rouge1: RougeScore {
                precision: c[0],
                recall: c[1],
                f1: c[2],
            },
            rouge2: RougeScore {
                precision: c[3],
                recall: c[4],
                f1: c[5],
            },
            rouge_l: RougeScore {
                precision: c[6],
                recall: c[7],
                f1: c[8],
            },
        }
    }

    /// One line per variant, four decimals.
    pub fn to_text(&self) -> String {
        let line = |name: &str, s: &RougeScore| {
            format!(
                "{name}: precision {:.4} recall {:.4} f1 {:.4}\n",
                s.precision, s.recall, s.f1
            )
        };
        let mut out = String::new();
        out.push_str(&line("rouge1", &self.rouge1));
        out.push_str(&line("rouge2", &self.rouge2));
        out.push_str(&line("rougeL", &self.rouge_l));
        out
    }
}

/// One scored sentence completion. `prompt` and `reference` are the two
/// word halves of `sentence`; `generation` is the decoded continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionEvalItem {
    pub sentence: String,
    pub prompt: String,
    pub reference: String,
    pub generation: String,
    pub scores: RougeReport,
}

/// Sentence-completion results: per-item detail, the macro average, and
/// any skip warnings. `options` holds the caller's base options; each
/// item's generation budget overrides `max_new_tokens`.
#[derive(Debug, Clone)]
pub struct CompletionEval {
    pub items: Vec<CompletionEvalItem>,
    pub mean: RougeReport,
    pub warnings: Vec<String>,
    pub options: GenerateOptions,
    pub seed: u64,
}

impl CompletionEval {
    pub fn to_text_report(&self) -> String {
        text_report(
            "sentence completion",
            self.items.len(),
            &self.mean,
            &self.options,
            self.seed,
            &self.warnings,
        )
    }
}

fn text_report(
    kind: &str,
    n_items: usize,
    mean: &RougeReport,
    options: &GenerateOptions,
    seed: u64,
    warnings: &[String],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "task: {kind}");
    let _ = writeln!(out, "items: {n_items}");
    let _ = writeln!(out, "seed: {seed}");
    let _ = writeln!(out, "options: {options:?}");
    out.push_str(&mean.to_text());
    for warning in warnings {
        let _ = writeln!(out, "warning: {warning}");
    }
    out
}

/// Splits each usable sentence at word index floor(w/2), prompts the
/// model with the first half, and scores the generated continuation
/// against the removed half. The generation budget per item is the
/// reference's token count plus 10.
///
/// All sentences are scanned first: those with fewer than 2 words are
/// skipped with a warning, fewer than `k` usable is an error, and only
/// the first `k` usable sentences are evaluated.
pub fn sentence_completion_eval<T: Float>(
    ckpt: &Checkpoint<T>,
    tokenizer: &TokenizerModel,
    sentences: &[String],
    k: usize,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<CompletionEval, EvalError> {
    ckpt.expect_vocab(tokenizer.vocab_size())?;
    let mut warnings = Vec::new();
    let mut usable: Vec<(&String, Vec<&str>)> = Vec::new();
    for (index, sentence) in sentences.iter().enumerate() {
        let words: Vec<&str> = tokenize_words(sentence).collect();
        if words.len() < 2 {
            warnings.push(format!("sentence {index}: fewer than 2 words, skipped"));
        } else {
            usable.push((sentence, words));
        }
    }
    if usable.len() < k {
        return Err(EvalError::TooFewUsable {
            usable: usable.len(),
            needed: k,
        });
    }
    usable.truncate(k);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(k);
    for (sentence, words) in usable {
        let half = words.len() / 2;
        let prompt = words[..half].join(" ");
        let reference = words[half..].join(" ");
        let prompt_ids = tokenizer.encode(&prompt);
        let budget = tokenizer.encode(&reference).len() + 10;
        let item_opts = GenerateOptions {
            max_new_tokens: budget,
            ..*opts
        };
        let out = generate(&ckpt.config, &ckpt.params, &prompt_ids, &item_opts, &mut rng)?;
        let generation = tokenizer.decode(&out)?;
        let scores = RougeReport::of_texts(&generation, &reference);
        items.push(CompletionEvalItem {
            sentence: sentence.clone(),
            prompt,
            reference,
            generation,
            scores,
        });
    }
    let per_item: Vec<RougeReport> = items.iter().map(|i| i.scores).collect();
    Ok(CompletionEval {
        mean: RougeReport::mean(&per_item),
        items,
        warnings,
        options: *opts,
        seed,
    })
}

/// One scored answer. `pair_index` points into the caller's pair list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEvalItem {
    pub pair_index: usize,
    pub question: String,
    pub gold: String,
    pub generated: String,
    pub scores: RougeReport,
}

/// QA evaluation results; the macro average is the headline number.
#[derive(Debug, Clone)]
pub struct QaEval {
    pub items: Vec<QaEvalItem>,
    pub mean: RougeReport,
    pub warnings: Vec<String>,
    pub options: GenerateOptions,
    pub seed: u64,
}

impl QaEval {
    pub fn to_text_report(&self) -> String {
        text_report(
            "question answering",
            self.items.len(),
            &self.mean,
            &self.options,
            self.seed,
            &self.warnings,
        )
    }
}

/// Scores generated answers against gold answers on a seeded sample of
/// `sample_n` pairs, without replacement. A test set smaller than
/// `sample_n` is evaluated in full with a warning.
pub fn evaluate_qa<T: Float>(
    ckpt: &Checkpoint<T>,
    tokenizer: &TokenizerModel,
    template: &PromptTemplate,
    pairs: &[QAPair],
    sample_n: usize,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<QaEval, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    ckpt.expect_vocab(tokenizer.vocab_size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    if pairs.len() > sample_n {
        indices.shuffle(&mut rng);
        indices.truncate(sample_n);
        indices.sort_unstable();
    } else if pairs.len() < sample_n {
        warnings.push(format!(
            "test set has {} pairs, fewer than the requested sample of {sample_n}; evaluating all",
            pairs.len()
        ));
    }
    let mut items = Vec::with_capacity(indices.len());
    for pair_index in indices {
        let pair = &pairs[pair_index];
        let generated = answer(ckpt, tokenizer, template, &pair.question, opts, &mut rng)?;
        let scores = RougeReport::of_texts(&generated, &pair.answer);
        items.push(QaEvalItem {
            pair_index,
            question: pair.question.clone(),
            gold: pair.answer.clone(),
            generated,
            scores,
        });
    }
    let per_item: Vec<RougeReport> = items.iter().map(|i| i.scores).collect();
    Ok(QaEval {
        mean: RougeReport::mean(&per_item),
        items,
        warnings,
        options: *opts,
        seed,
    })
}

/// One annotator's judgment of one generated sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub annotator_id: String,
    pub coherence: bool,
    pub consistency: bool,
}

pub const ANNOTATION_HEADER: [&str; 5] =
    ["sample_id", "prompt", "generation", "coherence", "consistency"];

/// Writes a blank annotation sheet: the header plus one row per
/// `(sample_id, prompt, generation)` sample with empty label cells.
/// Plain UTF-8 without a byte-order mark; fields containing commas,
/// quotes, or newlines are quoted per CSV rules.
pub fn export_annotation_sheet(
    samples: &[(String, String, String)],
    path: &Path,
) -> Result<(), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let sheet = |source: csv::Error| EvalError::Sheet {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(sheet)?;
    writer.write_record(ANNOTATION_HEADER).map_err(sheet)?;
    for (sample_id, prompt, generation) in samples {
        writer
            .write_record([sample_id.as_str(), prompt, generation, "", ""])
            .map_err(sheet)?;
    }
    writer.flush().map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Boolean labels: {1, yes, true} positive, {0, no, false} negative,
/// case-insensitive.
fn parse_label(value: &str) -> Option<bool> {
    match value.trim().to_lowercase().as_str() {
        "1" | "yes" | "true" => Some(true),
        "0" | "no" | "false" => Some(false),
        _ => None,
    }
}

/// Reads back a filled annotation sheet. The sheet has no annotator
/// column (each annotator fills their own copy), so the caller names
/// the annotator. Columns are found by header name; extra columns are
/// ignored. Rows are numbered as in the file, with the header as row 1.
pub fn parse_annotation_sheet(
    path: &Path,
    annotator_id: &str,
) -> Result<Vec<AnnotationRecord>, EvalError> {
    let sheet = |source: csv::Error| EvalError::Sheet {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(sheet)?;
    let headers = reader.headers().map_err(sheet)?.clone();
    let column = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(EvalError::MissingColumn {
                path: path.to_path_buf(),
                column: name,
            })
    };
    let id_col = column("sample_id")?;
    let coherence_col = column("coherence")?;
    let consistency_col = column("consistency")?;
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(sheet)?;
        let label = |col: usize| {
            let value = row.get(col).unwrap_or("");
            parse_label(value).ok_or_else(|| EvalError::BadLabel {
                path: path.to_path_buf(),
                row: row_no,
                value: value.to_string(),
            })
        };
        records.push(AnnotationRecord {
            sample_id: row.get(id_col).unwrap_or("").to_string(),
            annotator_id: annotator_id.to_string(),
            coherence: label(coherence_col)?,
            consistency: label(consistency_col)?,
        });
    }
    Ok(records)
}

/// One annotator's positive rates over their own judgments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub annotator_id: String,
    pub n_judgments: usize,
    pub coherence_pct: f64,
    pub consistency_pct: f64,
}

/// Aggregated human judgments. The headline percentages pool every
/// (sample, annotator) judgment; `per_annotator` is sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalReport {
    pub coherence_pct: f64,
    pub consistency_pct: f64,
    pub per_annotator: Vec<AnnotatorStats>,
    pub n_samples: usize,
    pub n_annotators: usize,
    pub n_judgments: usize,
}

/// Percentage with at most four decimals, trailing zeros trimmed.
fn format_pct(p: f64) -> String {
    let s = format!("{p:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

impl HumanEvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "coherence: {}", format_pct(self.coherence_pct));
        let _ = writeln!(out, "consistency: {}", format_pct(self.consistency_pct));
        let _ = writeln!(
            out,
            "judgments: {} ({} samples, {} annotators)",
            self.n_judgments, self.n_samples, self.n_annotators
        );
        for a in &self.per_annotator {
            let _ = writeln!(
                out,
                "annotator {}: coherence {} consistency {} ({} judgments)",
                a.annotator_id,
                format_pct(a.coherence_pct),
                format_pct(a.consistency_pct),
                a.n_judgments
            );
        }
        out
    }
}

/// Per annotator: (judgment count, coherence positives, consistency positives).
type AnnotatorTally<'a> = BTreeMap<&'a str, (usize, usize, usize)>;

fn tally_annotators(records: &[AnnotationRecord]) -> Result<(AnnotatorTally<'_>, usize), EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut seen = HashSet::new();
    let mut samples = HashSet::new();
    let mut by_annotator: AnnotatorTally<'_> = BTreeMap::new();
    for r in records {
        if !seen.insert((r.sample_id.as_str(), r.annotator_id.as_str())) {
            return Err(EvalError::DuplicateJudgment {
                sample_id: r.sample_id.clone(),
                annotator_id: r.annotator_id.clone(),
            });
        }
        samples.insert(r.sample_id.as_str());
        let slot = by_annotator.entry(r.annotator_id.as_str()).or_default();
        slot.0 += 1;
        if r.coherence {
            slot.1 += 1;
        }
        if r.consistency {
            slot.2 += 1;
        }
    }
    Ok((by_annotator, samples.len()))
}

/// Pools all (sample, annotator) judgments: each percentage is
/// 100 x positive labels / total labels. Output does not depend on
/// record order. Duplicate (sample, annotator) pairs are an error.
pub fn score_annotations(records: &[AnnotationRecord]) -> Result<HumanEvalReport, EvalError> {
    let (by_annotator, n_samples) = tally_annotators(records)?;
    let total = records.len();
    let coherence = records.iter().filter(|r| r.coherence).count();
    let consistency = records.iter().filter(|r| r.consistency).count();
    let per_annotator = by_annotator
        .into_iter()
        .map(|(annotator_id, (n, coh, con))| AnnotatorStats {
            annotator_id: annotator_id.to_string(),
            n_judgments: n,
            coherence_pct: 100.0 * ratio(coh as u64, n),
            consistency_pct: 100.0 * ratio(con as u64, n),
        })
        .collect::<Vec<_>>();
    Ok(HumanEvalReport {
        coherence_pct: 100.0 * ratio(coherence as u64, total),
        consistency_pct: 100.0 * ratio(consistency as u64, total),
        n_annotators: per_annotator.len(),
        per_annotator,
        n_samples,
        n_judgments: total,
    })
}

/// Majority-vote aggregation: a sample counts positive for a criterion
/// when strictly more than half of its judgments are positive (an exact
/// tie counts negative), and the headline percentages are over samples.
/// The per-annotator breakdown stays pooled.
pub fn score_annotations_majority(
    records: &[AnnotationRecord],
) -> Result<HumanEvalReport, EvalError> {
    let pooled = score_annotations(records)?;
    let mut by_sample: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let slot = by_sample.entry(r.sample_id.as_str()).or_default();
        slot.0 += 1;
        if r.coherence {
            slot.1 += 1;
        }
        if r.consistency {
            slot.2 += 1;
        }
    }
    let n_samples = by_sample.len();
    let coherence = by_sample.values().filter(|(n, coh, _)| 2 * coh > *n).count();
    let consistency = by_sample.values().filter(|(n, _, con)| 2 * con > *n).count();
    Ok(HumanEvalReport {
        coherence_pct: 100.0 * ratio(coherence as u64, n_samples),
        consistency_pct: 100.0 * ratio(consistency as u64, n_samples),
        ..pooled
    })
}
