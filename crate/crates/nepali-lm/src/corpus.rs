//! Devanagari corpus ingestion, cleaning, segmentation, and profiling.
//!
//! A corpus moves through three stages: raw documents come in via [`ingest`],
//! [`clean`] filters them down to lines of allowed codepoints, and the clean
//! corpus is profiled ([`compute_stats`], [`word_frequencies`]) or split into
//! fixed-size shards ([`shard`]) for downstream training.
//!
//! Counting conventions used throughout (and by the evaluation module, which
//! reuses [`tokenize_words`]):
//!
//! * a *word* is a whitespace-delimited token with sentence punctuation
//!   stripped from both edges; a bare punctuation token is not a word
//! * a *character* is a Unicode scalar value, so "राम" has length 3
//! * a *sentence* is a fragment produced by [`segment_sentences`]

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// U+0964, the Devanagari sentence terminator.
pub const DANDA: char = '।';
/// U+0965, the double danda used to close verses and section ends.
pub const DOUBLE_DANDA: char = '॥';

/// Characters that end a sentence during segmentation.
const SENTENCE_TERMINATORS: [char; 4] = [DANDA, DOUBLE_DANDA, '?', '!'];

/// Punctuation stripped from word edges before counting. Dandas plus the
/// ASCII clause punctuation that survives loose cleaning policies.
const WORD_EDGE_PUNCTUATION: [char; 8] = [DANDA, DOUBLE_DANDA, '?', '!', ',', '.', ';', ':'];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { path: PathBuf, offset: usize },
    #[error("cleaning policy allows no codepoint ranges")]
    EmptyPolicy,
    #[error("lines_per_shard must be at least 1")]
    ZeroShardSize,
}

/// Where a document came from. Recorded per document and carried through to
/// the clean corpus as provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Scraped,
    Translated,
    Dataset,
    Other,
}

/// One raw input document: an identifier (usually the file path), its full
/// text, and its origin.
#[derive(Debug, Clone)]
pub struct RawDocument {
    pub source_id: String,
    pub text: String,
    pub origin: Origin,
}

/// Granularity at which the Latin/alphanumeric rejection discards input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropUnit {
    /// A line containing any rejected token is removed whole.
    Line,
    /// Only the offending tokens are removed; the rest of the line survives.
    Token,
}

/// Which codepoints survive cleaning and how rejections are applied.
///
/// Whitespace is always allowed: line and token structure depends on it, so
/// it is not subject to `allowed_blocks`. The default policy keeps the
/// Devanagari block U+0900..=U+097F (which includes both dandas and the
/// digits ०..९) and drops whole lines containing ASCII `[A-Za-z0-9]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleaningPolicy {
    pub allowed_blocks: Vec<RangeInclusive<char>>,
    pub reject_latin_alphanumeric: bool,
    pub drop_unit: DropUnit,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            allowed_blocks: vec!['\u{0900}'..='\u{097F}'],
            reject_latin_alphanumeric: true,
            drop_unit: DropUnit::Line,
        }
    }
}

impl CleaningPolicy {
    /// True when `c` may appear in a cleaned line.
    pub fn allows(&self, c: char) -> bool {
        c.is_whitespace() || self.allowed_blocks.iter().any(|r| r.contains(&c))
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.allowed_blocks.is_empty() {
            return Err(CorpusError::EmptyPolicy);
        }
        Ok(())
    }
}

/// Tally of what cleaning kept and discarded. Totals aggregate across
/// documents; `dropped_tokens` is only populated in [`DropUnit::Token`] mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CleanReport {
    pub input_lines: u64,
    pub kept_lines: u64,
    pub dropped_lines: u64,
    pub dropped_tokens: u64,
    pub stripped_chars: u64,
}

impl CleanReport {
    fn absorb(&mut self, other: CleanReport) {
        self.input_lines += other.input_lines;
        self.kept_lines += other.kept_lines;
        self.dropped_lines += other.dropped_lines;
        self.dropped_tokens += other.dropped_tokens;
        self.stripped_chars += other.stripped_chars;
    }
}

/// A run of consecutive corpus lines that share one source document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRun {
    /// Index of the first line of the run.
    pub start: usize,
    pub source_id: String,
}

/// Cleaned corpus: non-empty lines, each satisfying the policy it was
/// cleaned under, plus line-to-source provenance.
///
/// Serialization is one line per corpus line, each terminated by `\n`; that
/// byte stream is what [`CorpusStats::byte_size`] measures and what
/// [`shard`] reproduces exactly when its outputs are concatenated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanCorpus {
    lines: Vec<String>,
    provenance: Vec<ProvenanceRun>,
}

impl CleanCorpus {
    /// Wraps already-clean lines under a single source id. Cleanliness is the
    /// caller's responsibility; this is the entry point for text that skipped
    /// the cleaning pipeline (fixtures, pre-cleaned files).
    pub fn from_lines(lines: Vec<String>, source_id: impl Into<String>) -> Self {
        let provenance = if lines.is_empty() {
            Vec::new()
        } else {
            vec![ProvenanceRun { start: 0, source_id: source_id.into() }]
        };
        CleanCorpus { lines, provenance }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn provenance(&self) -> &[ProvenanceRun] {
        &self.provenance
    }

    /// Source id of the document that produced line `index`.
    pub fn source_of(&self, index: usize) -> Option<&str> {
        if index >= self.lines.len() {
            return None;
        }
        match self.provenance.binary_search_by(|run| run.start.cmp(&index)) {
            Ok(i) => Some(&self.provenance[i].source_id),
            Err(0) => None,
            Err(i) => Some(&self.provenance[i - 1].source_id),
        }
    }

    /// Canonical byte serialization: every line followed by `\n`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.byte_size() as usize);
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    /// Byte length of [`Self::to_text`] without materializing it.
    pub fn byte_size(&self) -> u64 {
        self.lines.iter().map(|l| l.len() as u64 + 1).sum()
    }

    fn append_document(&mut self, source_id: &str, lines: Vec<String>) {
        if lines.is_empty() {
            return;
        }
        self.provenance.push(ProvenanceRun {
            start: self.lines.len(),
            source_id: source_id.to_owned(),
        });
        self.lines.extend(lines);
    }
}

/// Reads each path into a [`RawDocument`], lazily, in input order. I/O and
/// encoding failures surface per file with the offending path (and the byte
/// offset for invalid UTF-8).
pub fn ingest<'a>(
    paths: &'a [PathBuf],
    origin: Origin,
) -> impl Iterator<Item = Result<RawDocument, CorpusError>> + 'a {
    paths.iter().map(move |path| read_document(path, origin))
}

fn read_document(path: &Path, origin: Origin) -> Result<RawDocument, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::InvalidUtf8 {
        path: path.to_owned(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    Ok(RawDocument {
        source_id: path.display().to_string(),
        text,
        origin,
    })
}

fn contains_ascii_alphanumeric(s: &str) -> bool {
    s.bytes().any(|b| b.is_ascii_alphanumeric())
}

fn clean_line(line: &str, policy: &CleaningPolicy, report: &mut CleanReport) -> Option<String> {
    let mut candidate = String::new();
    if policy.reject_latin_alphanumeric {
        match policy.drop_unit {
            DropUnit::Line => {
                if contains_ascii_alphanumeric(line) {
                    return None;
                }
                candidate.push_str(line);
            }
            DropUnit::Token => {
                for token in line.split_whitespace() {
                    if contains_ascii_alphanumeric(token) {
                        report.dropped_tokens += 1;
                    } else {
                        if !candidate.is_empty() {
                            candidate.push(' ');
                        }
                        candidate.push_str(token);
                    }
                }
            }
        }
    } else {
        candidate.push_str(line);
    }

    let mut kept = String::with_capacity(candidate.len());
    for c in candidate.chars() {
        if policy.allows(c) {
            kept.push(c);
        } else {
            report.stripped_chars += 1;
        }
    }
    let trimmed = kept.trim();
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_owned())
    }
}

/// Cleans one document into surviving lines. Total: every input line either
/// survives (possibly with disallowed codepoints stripped) or is counted as
/// dropped. Iterating this twice is a fixed point.
pub fn clean_document(
    doc: &RawDocument,
    policy: &CleaningPolicy,
) -> Result<(Vec<String>, CleanReport), CorpusError> {
    policy.validate()?;
    let mut report = CleanReport::default();
    let mut lines = Vec::new();
    for raw in doc.text.lines() {
        report.input_lines += 1;
        match clean_line(raw, policy, &mut report) {
            Some(line) => {
                report.kept_lines += 1;
                lines.push(line);
            }
            None => report.dropped_lines += 1,
        }
    }
    Ok((lines, report))
}

/// Cleans documents in order into one corpus, recording per-document
/// provenance and an aggregate report.
pub fn clean(
    docs: &[RawDocument],
    policy: &CleaningPolicy,
) -> Result<(CleanCorpus, CleanReport), CorpusError> {
    policy.validate()?;
    let mut corpus = CleanCorpus::default();
    let mut total = CleanReport::default();
    for doc in docs {
        let (lines, report) = clean_document(doc, policy)?;
        total.absorb(report);
        corpus.append_document(&doc.source_id, lines);
    }
    Ok((corpus, total))
}

/// Splits text into sentences on danda, double danda, `?`, `!`, and newline.
/// Terminators stay attached to their sentence (a run of consecutive
/// terminators stays together); fragments are trimmed and empty ones are
/// discarded, so a trailing unterminated clause still counts as a sentence.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    // A fragment only counts as a sentence if it carries content beyond
    // terminators and whitespace; a stray danda is punctuation, not a
    // sentence.
    let mut flush = |buf: &mut String| {
        let trimmed = buf.trim();
        let has_content = trimmed
            .chars()
            .any(|c| !SENTENCE_TERMINATORS.contains(&c) && !c.is_whitespace());
        if has_content {
            sentences.push(trimmed.to_owned());
        }
        buf.clear();
    };
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' {
            flush(&mut current);
        } else if SENTENCE_TERMINATORS.contains(&c) {
            current.push(c);
            while chars.peek().is_some_and(|n| SENTENCE_TERMINATORS.contains(n)) {
                current.push(chars.next().unwrap());
            }
            flush(&mut current);
        } else {
            current.push(c);
        }
    }
    flush(&mut current);
    sentences
}

/// Words of a line: whitespace-split tokens with sentence punctuation
/// stripped from both edges. Tokens that were pure punctuation vanish.
pub fn tokenize_words(line: &str) -> impl Iterator<Item = &str> {
    line.split_whitespace().filter_map(|token| {
        let word = token.trim_matches(&WORD_EDGE_PUNCTUATION[..]);
        if word.is_empty() {
            None
        } else {
            Some(word)
        }
    })
}

/// Corpus profile. Lengths count Unicode scalar values, never bytes;
/// `byte_size` alone is a byte count (of [`CleanCorpus::to_text`]).
/// An empty corpus yields all zeros.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_tokens: u64,
    pub total_sentences: u64,
    pub avg_sentence_len_words: f64,
    pub avg_word_len_chars: f64,
    pub vocab_size: u64,
    pub byte_size: u64,
}

impl CorpusStats {
    /// Flat key-value rendering, one `key: value` line per field, in the
    /// same order as the struct declaration.
    pub fn to_text_report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total_tokens: {}", self.total_tokens);
        let _ = writeln!(out, "total_sentences: {}", self.total_sentences);
        let _ = writeln!(out, "avg_sentence_len_words: {}", self.avg_sentence_len_words);
        let _ = writeln!(out, "avg_word_len_chars: {}", self.avg_word_len_chars);
        let _ = writeln!(out, "vocab_size: {}", self.vocab_size);
        let _ = writeln!(out, "byte_size: {}", self.byte_size);
        out
    }
}

/// Single-pass profile of a clean corpus.
pub fn compute_stats(corpus: &CleanCorpus) -> CorpusStats {
    let mut tokens: u64 = 0;
    let mut sentence_count: u64 = 0;
    let mut char_total: u64 = 0;
    let mut vocab: HashSet<&str> = HashSet::new();
    for line in corpus.lines() {
        sentence_count += segment_sentences(line).len() as u64;
        for word in tokenize_words(line) {
            tokens += 1;
            char_total += word.chars().count() as u64;
            vocab.insert(word);
        }
    }
    CorpusStats {
        total_tokens: tokens,
        total_sentences: sentence_count,
        avg_sentence_len_words: if sentence_count == 0 {
            0.0
        } else {
            tokens as f64 / sentence_count as f64
        },
        avg_word_len_chars: if tokens == 0 {
            0.0
        } else {
            char_total as f64 / tokens as f64
        },
        vocab_size: vocab.len() as u64,
        byte_size: corpus.byte_size(),
    }
}

/// Word frequency table ordered by count descending, ties broken by
/// codepoint order of the word ascending. Truncation keeps the head, so the
/// table is a prefix of the untruncated ordering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    entries: Vec<(String, u64)>,
}

impl FrequencyTable {
    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    /// Two-column `word<TAB>count` rendering, one row per entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (word, count) in &self.entries {
            let _ = writeln!(out, "{word}\t{count}");
        }
        out
    }
}

/// Counts word occurrences over the corpus. `top` keeps only the most
/// frequent entries after ordering; `None` keeps the full table.
pub fn word_frequencies(corpus: &CleanCorpus, top: Option<usize>) -> FrequencyTable {
    let mut counts: std::collections::HashMap<&str, u64> = std::collections::HashMap::new();
    for line in corpus.lines() {
        for word in tokenize_words(line) {
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.to_owned(), c))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(n) = top {
        entries.truncate(n);
    }
    FrequencyTable { entries }
}

/// Writes the corpus as `shard_00000.txt`, `shard_00001.txt`, ... under
/// `dir`, at most `lines_per_shard` lines each, every line newline
/// terminated. Concatenating the shards in name order reproduces
/// [`CleanCorpus::to_text`] byte for byte. An empty corpus writes nothing.
pub fn shard(
    corpus: &CleanCorpus,
    lines_per_shard: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>, CorpusError> {
    if lines_per_shard == 0 {
        return Err(CorpusError::ZeroShardSize);
    }
    let io_err = |path: &Path, source: std::io::Error| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut paths = Vec::new();
    for (index, chunk) in corpus.lines().chunks(lines_per_shard).enumerate() {
        let path = dir.join(format!("shard_{index:05}.txt"));
        let mut body = String::new();
        for line in chunk {
            body.push_str(line);
            body.push('\n');
        }
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Default shard size used by the command-line interface.
pub const DEFAULT_LINES_PER_SHARD: usize = 10_000;
