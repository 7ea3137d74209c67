//! Subword tokenizer: byte-pair encoding over Unicode scalars with a
//! SentencePiece-style whitespace marker.
//!
//! Words are marked rather than spaces: pre-tokenization splits text on
//! whitespace and prefixes every word with [`WHITESPACE_MARKER`], so the
//! marker is an ordinary symbol in the base alphabet and decoding is a pure
//! string operation (concatenate, turn markers back into spaces).
//!
//! Training starts from the base alphabet (every distinct scalar in the
//! pre-tokenized corpus) and greedily merges the most frequent adjacent
//! symbol pair until the vocabulary reaches its target size or no pair
//! reaches `min_pair_freq`. Ties go to the lexicographically smallest
//! `(left, right)` pair by codepoint, which makes training deterministic.
//!
//! The vocabulary always satisfies
//! `len == 4 specials + base alphabet + merges`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::CleanCorpus;

/// U+2581 LOWER ONE EIGHTH BLOCK, prefixed to every word during
/// pre-tokenization and turned back into a space when decoding.
pub const WHITESPACE_MARKER: char = '\u{2581}';

/// Id of the unknown-symbol token.
pub const UNK_ID: u32 = 0;
/// Id of the beginning-of-sequence token.
pub const BOS_ID: u32 = 1;
/// Id of the end-of-sequence token.
pub const EOS_ID: u32 = 2;
/// Id of the padding token.
pub const PAD_ID: u32 = 3;

/// Special token strings, indexed by their fixed ids 0..=3.
pub const SPECIAL_TOKENS: [&str; 4] = ["<unk>", "<bos>", "<eos>", "<pad>"];

/// On-disk format version this build writes and accepts.
pub const TOKENIZER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus contains no words")]
    EmptyCorpus,
    #[error(
        "target_vocab {requested} is too small: minimum is {minimum} \
         (4 specials + {base} base characters)"
    )]
    VocabTooSmall {
        requested: usize,
        minimum: usize,
        base: usize,
    },
    #[error("token id {id} is out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed tokenizer file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("tokenizer file version {found} is unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("duplicate token {token:?} in vocabulary")]
    DuplicateToken { token: String },
}

/// Bidirectional token table. Ids 0..=3 are always the specials, in
/// [`SPECIAL_TOKENS`] order; base characters follow in codepoint order, then
/// merge products in merge order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut vocab = Vocab::default();
        for s in SPECIAL_TOKENS {
            vocab.push(s.to_owned()).expect("specials are distinct");
        }
        vocab
    }

    fn push(&mut self, token: String) -> Result<u32, TokenizerError> {
        if self.token_to_id.contains_key(&token) {
            return Err(TokenizerError::DuplicateToken { token });
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        Ok(id)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Training knobs. `target_vocab` counts everything: specials, base
/// alphabet, and merges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainParams {
    pub target_vocab: usize,
    pub min_pair_freq: u64,
    pub nfc: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            target_vocab: 10_000,
            min_pair_freq: 2,
            nfc: true,
        }
    }
}

/// A trained tokenizer: vocabulary, ordered merge list, and the
/// normalization it applies before segmenting.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    vocab: Vocab,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), u32>,
    nfc: bool,
}

impl TokenizerModel {
    fn assemble(
        vocab: Vocab,
        merges: Vec<(String, String)>,
        nfc: bool,
    ) -> Self {
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank as u32))
            .collect();
        TokenizerModel {
            vocab,
            merges,
            merge_ranks,
            nfc,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn normalizes_nfc(&self) -> bool {
        self.nfc
    }

    fn normalize(&self, text: &str) -> String {
        if self.nfc {
            text.nfc().collect()
        } else {
            text.to_owned()
        }
    }

    /// Splits one pre-tokenized word (marker already prefixed) into symbols
    /// and repeatedly applies the lowest-ranked merge present until none
    /// applies. Equivalent to one pass per merge in rank order, leftmost
    /// first: a merge can never re-enable an earlier one, because every
    /// merge product is a strictly longer symbol.
    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.merge_ranks.get(&key) {
                    let better = match best {
                        None => true,
                        Some((best_rank, _)) => rank < best_rank,
                    };
                    if better {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        symbols
    }

    /// Normalizes, splits on whitespace, prefixes each word with the
    /// marker, and maps merged symbols to ids. Symbols outside the
    /// vocabulary become [`UNK_ID`]; `bos`/`eos` are never emitted here,
    /// callers add them. Empty or all-whitespace input yields no ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let normalized = self.normalize(text);
        let mut ids = Vec::new();
        let mut word_cache: HashMap<String, Vec<u32>> = HashMap::new();
        for word in normalized.split_whitespace() {
            if let Some(cached) = word_cache.get(word) {
                ids.extend_from_slice(cached);
                continue;
            }
            let marked = format!("{WHITESPACE_MARKER}{word}");
            let word_ids: Vec<u32> = self
                .segment_word(&marked)
                .iter()
                .map(|sym| self.vocab.id(sym).unwrap_or(UNK_ID))
                .collect();
            ids.extend_from_slice(&word_ids);
            word_cache.insert(word.to_owned(), word_ids);
        }
        ids
    }

    /// Concatenates token strings, turns every marker into a space, and
    /// strips the single leading space the first word's marker produced.
    /// Fails on any id outside the vocabulary, naming the id.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut joined = String::new();
        for &id in ids {
            let token = self
                .vocab
                .token(id)
                .ok_or(TokenizerError::IdOutOfRange {
                    id,
                    vocab_size: self.vocab.len(),
                })?;
            joined.push_str(token);
        }
        let replaced: String = joined
            .chars()
            .map(|c| if c == WHITESPACE_MARKER { ' ' } else { c })
            .collect();
        Ok(replaced
            .strip_prefix(' ')
            .map(str::to_owned)
            .unwrap_or(replaced))
    }
}

/// Applies one merge `(a, b) -> a+b` to an interned symbol sequence,
/// greedily and leftmost first; overlapping occurrences do not cascade.
fn apply_merge(symbols: &mut Vec<u32>, a: u32, b: u32, merged: u32) {
    let mut read = 0;
    let mut write = 0;
    while read < symbols.len() {
        if read + 1 < symbols.len() && symbols[read] == a && symbols[read + 1] == b {
            symbols[write] = merged;
            read += 2;
        } else {
            symbols[write] = symbols[read];
            read += 1;
        }
        write += 1;
    }
    symbols.truncate(write);
}

/// Trains a byte-pair encoding on a clean corpus.
///
/// Every round recounts which adjacent pair is most frequent across the word
/// multiset (incrementally: only words containing the merged pair are
/// rescanned), merges it everywhere, and appends the product to the
/// vocabulary. Stops at `target_vocab` total entries or when the best pair
/// falls below `min_pair_freq`.
pub fn train_bpe(
    corpus: &CleanCorpus,
    params: &TrainParams,
) -> Result<TokenizerModel, TokenizerError> {
    // Pre-tokenize into a word multiset.
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for line in corpus.lines() {
        let normalized: String = if params.nfc {
            line.nfc().collect()
        } else {
            line.clone()
        };
        for word in normalized.split_whitespace() {
            *word_counts
                .entry(format!("{WHITESPACE_MARKER}{word}"))
                .or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    // Base alphabet in codepoint order.
    let base: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let minimum = SPECIAL_TOKENS.len() + base.len();
    if params.target_vocab < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: params.target_vocab,
            minimum,
            base: base.len(),
        });
    }

    let mut vocab = Vocab::with_specials();
    // Symbol id i corresponds to vocab id i + 4. Symbols grow as merges land.
    let mut sym_strings: Vec<String> = Vec::with_capacity(base.len());
    let mut sym_ids: HashMap<char, u32> = HashMap::new();
    for c in &base {
        sym_ids.insert(*c, sym_strings.len() as u32);
        sym_strings.push(c.to_string());
        vocab.push(c.to_string())?;
    }

    // Intern words; sort for reproducible bookkeeping.
    let mut word_list: Vec<(String, u64)> = word_counts.into_iter().collect();
    word_list.sort_by(|a, b| a.0.cmp(&b.0));
    let mut words: Vec<(Vec<u32>, u64)> = word_list
        .into_iter()
        .map(|(w, c)| (w.chars().map(|ch| sym_ids[&ch]).collect(), c))
        .collect();

    // Pair statistics: total frequency and which words contain each pair.
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (idx, (syms, count)) in words.iter().enumerate() {
        for pair in syms.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_insert(0) += count;
            pair_words.entry(key).or_default().insert(idx);
        }
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    while vocab.len() < params.target_vocab {
        // Argmax by (frequency desc, then (left, right) strings ascending).
        // The comparator totally orders candidates, so map iteration order
        // cannot influence the winner.
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &pair_counts {
            if count < params.min_pair_freq {
                continue;
            }
            let better = match best {
                None => true,
                Some((best_pair, best_count)) => {
                    count > best_count
                        || (count == best_count
                            && (
                                sym_strings[pair.0 as usize].as_str(),
                                sym_strings[pair.1 as usize].as_str(),
                            ) < (
                                sym_strings[best_pair.0 as usize].as_str(),
                                sym_strings[best_pair.1 as usize].as_str(),
                            ))
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((a, b), _)) = best else { break };

        let left = sym_strings[a as usize].clone();
        let right = sym_strings[b as usize].clone();
        let product = format!("{left}{right}");
        vocab.push(product.clone())?;
        let merged = sym_strings.len() as u32;
        sym_strings.push(product);
        merges.push((left, right));

        // Rescan only the words that contain the merged pair, removing
        // their old pair contributions and adding the new ones.
        let mut affected: Vec<usize> = pair_words
            .get(&(a, b))
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for idx in affected {
            let count = words[idx].1;
            for pair in words[idx].0.windows(2) {
                let key = (pair[0], pair[1]);
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= count;
                    if *c == 0 {
                        pair_counts.remove(&key);
                    }
                }
                if let Some(set) = pair_words.get_mut(&key) {
                    set.remove(&idx);
                    if set.is_empty() {
                        pair_words.remove(&key);
                    }
                }
            }
            apply_merge(&mut words[idx].0, a, b, merged);
            for pair in words[idx].0.windows(2) {
                let key = (pair[0], pair[1]);
                *pair_counts.entry(key).or_insert(0) += count;
                pair_words.entry(key).or_default().insert(idx);
            }
        }
    }

    Ok(TokenizerModel::assemble(vocab, merges, params.nfc))
}

#[derive(Serialize, Deserialize)]
struct NormalizationSection {
    nfc: bool,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    normalization: NormalizationSection,
    specials: Vec<String>,
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
}

impl TokenizerModel {
    /// Canonical file rendering: UTF-8 JSON with fixed field order and a
    /// trailing newline. Saving what [`Self::load`] read reproduces the
    /// file byte for byte.
    pub fn to_file_string(&self) -> String {
        let file = TokenizerFile {
            version: TOKENIZER_FORMAT_VERSION,
            normalization: NormalizationSection { nfc: self.nfc },
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            vocab: self.vocab.tokens().to_vec(),
            merges: self.merges.clone(),
        };
        let mut body = serde_json::to_string_pretty(&file).expect("tokenizer file serializes");
        body.push('\n');
        body
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| TokenizerError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_file_string(&text, path)
    }

    fn from_file_string(text: &str, path: &Path) -> Result<Self, TokenizerError> {
        let malformed = |reason: String| TokenizerError::MalformedFile {
            path: path.to_owned(),
            reason,
        };
        let file: TokenizerFile =
            serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        if file.version != TOKENIZER_FORMAT_VERSION {
            return Err(TokenizerError::VersionMismatch {
                found: file.version,
                expected: TOKENIZER_FORMAT_VERSION,
            });
        }
        if file.specials.len() != SPECIAL_TOKENS.len() {
            return Err(malformed(format!(
                "expected {} specials, found {}",
                SPECIAL_TOKENS.len(),
                file.specials.len()
            )));
        }
        for (i, (found, expected)) in file.specials.iter().zip(SPECIAL_TOKENS).enumerate() {
            if found != expected {
                return Err(malformed(format!(
                    "special id {i} is {found:?}, expected {expected:?}"
                )));
            }
        }
        if file.vocab.len() < SPECIAL_TOKENS.len() {
            return Err(malformed("vocabulary smaller than the specials".into()));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if file.vocab[i] != *s {
                return Err(malformed(format!(
                    "vocab id {i} is {:?}, expected special {s:?}",
                    file.vocab[i]
                )));
            }
        }
        let mut vocab = Vocab::default();
        for token in &file.vocab {
            vocab.push(token.clone())?;
        }
        for (rank, (left, right)) in file.merges.iter().enumerate() {
            for part in [left, right] {
                if vocab.id(part).is_none() {
                    return Err(malformed(format!(
                        "merge {rank} references unknown token {part:?}"
                    )));
                }
            }
            let product = format!("{left}{right}");
            if vocab.id(&product).is_none() {
                return Err(malformed(format!(
                    "merge {rank} product {product:?} missing from vocabulary"
                )));
            }
        }
        Ok(TokenizerModel::assemble(
            vocab,
            file.merges,
            file.normalization.nfc,
        ))
    }
}
