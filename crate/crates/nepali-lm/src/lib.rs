//! End-to-end toolkit for building a small Nepali causal language model:
//! cleaning a Devanagari corpus, training a byte-pair-encoding tokenizer on
//! it, pretraining a decoder-only transformer, fine-tuning it on
//! question-answer pairs, and scoring the results.
//!
//! The pieces compose in pipeline order:
//!
//! ```text
//! corpus  ->  tokenizer  ->  model  ->  qa  ->  eval
//! ```
//!
//! Each stage is usable on its own; the `cli` module stitches them into one
//! binary. Everything is deterministic given a configuration and a seed:
//! training twice with the same inputs produces bit-identical checkpoints.

pub mod cli;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod qa;
pub mod tokenizer;
