//! Decoder-only causal language model in the GPT-2 style: learned token and
//! position embeddings, pre-norm transformer blocks
//! (`x -> x + Attn(LN(x)) -> x + MLP(LN(x))`), a final layer norm, and an
//! output head tied to the token embedding.
//!
//! The forward and backward passes are written out by hand over flat
//! row-major buffers; there is no autograd. Training is plain Adam with
//! optional decoupled weight decay. Everything that draws randomness does so
//! from a seeded, serializable generator, so checkpoints capture the
//! complete training state and a paused run continues bit-identically.

mod adam;
mod checkpoint;
mod float;
mod generate;
mod math;
mod net;
mod train;

pub use adam::{adam_step, AdamState};
pub(crate) use adam::adam_step_with_lr;
pub(crate) use net::masked_cross_entropy;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use float::{Dtype, Float};
pub use generate::{generate, GenerateOptions, SamplingStrategy};
pub use math::LN_EPS;
pub use net::{
    cross_entropy_loss, forward, loss_and_grads, init_params, Forward, Mode, Parameters,
};
pub use train::{
    pack_windows, perplexity, perplexity_from_loss, train_clm, EpochMetrics, RngState,
    TrainOutcome,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadsMismatch { d_model: usize, n_heads: usize },
    #[error("context_len must be at least 2, got {0}")]
    ContextTooShort(usize),
    #[error("vocab_size must be at least 5 (4 specials plus content), got {0}")]
    VocabTooSmall(usize),
    #[error("dropout must lie in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("model dimensions must be positive")]
    ZeroDimension,
    #[error("token id {id} is out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds context_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token stream of {len} is too short: need at least {required}")]
    StreamTooShort { len: usize, required: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite training loss at global step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("top-k sampling requires k of at least 1")]
    ZeroTopK,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("checkpoint version {found} is unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint stores {found:?} tensors but {expected:?} was requested")]
    DtypeMismatch { found: Dtype, expected: Dtype },
    #[error("tensor {name}: shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: truncated or corrupt checkpoint ({context})")]
    Corrupt { path: PathBuf, context: String },
    #[error("checkpoint vocab_size {checkpoint} does not match tokenizer vocab {tokenizer}")]
    VocabMismatch { checkpoint: usize, tokenizer: usize },
    #[error("checkpoint was produced under a different model config")]
    ConfigMismatch,
}

/// Architecture hyperparameters. `d_ff` is the MLP hidden width,
/// conventionally `4 * d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale preset: d_model 128, 4 layers, 4 heads, context 256.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_len: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            dropout: 0.0,
            init_std: 0.02,
        }
    }

    /// Full GPT-2-small shape: d_model 768, 12 layers, 12 heads,
    /// context 1024. Provided for completeness; training it is far beyond
    /// desk scale.
    pub fn gpt2(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_len: 1024,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 5 {
            return Err(ModelError::VocabTooSmall(self.vocab_size));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if self.context_len < 2 {
            return Err(ModelError::ContextTooShort(self.context_len));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::HeadsMismatch {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadDropout(self.dropout));
        }
        Ok(())
    }
}

/// Pretraining hyperparameters. Defaults follow the reference recipe:
/// Adam(0.9, 0.999, 1e-8), learning rate 5e-5, batch 12 / eval batch 5,
/// 5 epochs, seed 42, no weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub train_batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            train_batch_size: 12,
            eval_batch_size: 5,
            epochs: 5,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_documented_shapes() {
        let tiny = ModelConfig::tiny(1000);
        assert_eq!(
            (tiny.d_model, tiny.n_layers, tiny.n_heads, tiny.context_len),
            (128, 4, 4, 256)
        );
        tiny.validate().unwrap();
        let gpt2 = ModelConfig::gpt2(50257);
        assert_eq!(
            (gpt2.d_model, gpt2.n_layers, gpt2.n_heads, gpt2.context_len),
            (768, 12, 12, 1024)
        );
        gpt2.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = ModelConfig::tiny(100);
        cfg.n_heads = 3;
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::HeadsMismatch { .. })
        ));
        let mut cfg = ModelConfig::tiny(100);
        cfg.context_len = 1;
        assert!(matches!(cfg.validate(), Err(ModelError::ContextTooShort(1))));
        let cfg = ModelConfig::tiny(3);
        assert!(matches!(cfg.validate(), Err(ModelError::VocabTooSmall(3))));
        let mut cfg = ModelConfig::tiny(100);
        cfg.dropout = 1.0;
        assert!(matches!(cfg.validate(), Err(ModelError::BadDropout(_))));
    }

    #[test]
    fn train_defaults_follow_the_reference_recipe() {
        let tc = TrainConfig::default();
        assert_eq!(tc.learning_rate, 5e-5);
        assert_eq!(tc.train_batch_size, 12);
        assert_eq!(tc.eval_batch_size, 5);
        assert_eq!(tc.epochs, 5);
        assert_eq!(tc.seed, 42);
        assert_eq!((tc.beta1, tc.beta2, tc.eps), (0.9, 0.999, 1e-8));
        assert_eq!(tc.weight_decay, 0.0);
    }
}
