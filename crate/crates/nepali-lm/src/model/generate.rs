//! Autoregressive decoding: greedy, temperature, and top-k sampling.
//!
//! Sampling math runs in f64 regardless of the model's float type, and all
//! randomness comes from the caller's generator, so a `(model, prompt,
//! options, rng state)` tuple always produces the same tokens.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::float::Float;
use super::net::{forward, Mode, Parameters};
use super::{ModelConfig, ModelError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingStrategy {
    /// Highest logit wins; ties break toward the lowest token id.
    Greedy,
    /// Softmax sampling after dividing logits by the temperature.
    Temperature(f64),
    /// Temperature sampling restricted to the k highest-logit tokens
    /// (ties on the boundary again favor lower ids). `k = 1` is greedy.
    TopK { k: usize, temperature: f64 },
}

impl SamplingStrategy {
    fn validate(&self) -> Result<(), ModelError> {
        let temp = match self {
            SamplingStrategy::Greedy => return Ok(()),
            SamplingStrategy::Temperature(t) => *t,
            SamplingStrategy::TopK { k, temperature } => {
                if *k == 0 {
                    return Err(ModelError::ZeroTopK);
                }
                *temperature
            }
        };
        if !(temp.is_finite() && temp > 0.0) {
            return Err(ModelError::BadTemperature(temp));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub strategy: SamplingStrategy,
    /// Decoding stops when this token is produced; it is not returned.
    pub eos_id: Option<u32>,
    /// Seed token for an empty prompt: the model needs at least one input
    /// position before it can predict.
    pub bos_id: u32,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_new_tokens: 100,
            strategy: SamplingStrategy::Greedy,
            eos_id: Some(crate::tokenizer::EOS_ID),
            bos_id: crate::tokenizer::BOS_ID,
        }
    }
}

/// CDF walk over `(id, probability)` candidates. The final candidate
/// absorbs any floating point shortfall so the walk always lands.
fn sample_cdf(candidates: &[(u32, f64)], u: f64) -> u32 {
    let mut cum = 0.0;
    for &(id, p) in candidates {
        cum += p;
        if u < cum {
            return id;
        }
    }
    candidates.last().expect("candidate list is never empty").0
}

fn softmax_f64(scores: &mut [(u32, f64)]) {
    let max = scores
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (_, s) in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for (_, s) in scores.iter_mut() {
        *s /= sum;
    }
}

fn pick_next(
    logits: &[f64],
    strategy: &SamplingStrategy,
    rng: &mut ChaCha8Rng,
) -> u32 {
    match strategy {
        SamplingStrategy::Greedy => {
            let mut best = 0usize;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        SamplingStrategy::Temperature(temp) => {
            let mut scores: Vec<(u32, f64)> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| (i as u32, l / temp))
                .collect();
            softmax_f64(&mut scores);
            sample_cdf(&scores, rng.random::<f64>())
        }
        SamplingStrategy::TopK { k, temperature } => {
            let mut scores: Vec<(u32, f64)> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| (i as u32, l))
                .collect();
            // Highest logit first; equal logits keep ascending id order.
            scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scores.truncate((*k).min(logits.len()));
            for (_, s) in scores.iter_mut() {
                *s /= temperature;
            }
            softmax_f64(&mut scores);
            sample_cdf(&scores, rng.random::<f64>())
        }
    }
}

/// Generates up to `max_new_tokens` continuation tokens for `prompt`.
/// Returns only the new tokens. When the context fills up, the oldest
/// tokens fall out of the window (left truncation).
pub fn generate<T: Float>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    prompt: &[u32],
    opts: &GenerateOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>, ModelError> {
    cfg.validate()?;
    opts.strategy.validate()?;
    let mut ids: Vec<u32> = if prompt.is_empty() {
        vec![opts.bos_id]
    } else {
        prompt.to_vec()
    };
    let mut out = Vec::new();
    for _ in 0..opts.max_new_tokens {
        let start = ids.len().saturating_sub(cfg.context_len);
        let window = &ids[start..];
        let fwd = forward(cfg, params, window, 1, window.len(), Mode::Eval, None)?;
        let v = cfg.vocab_size;
        let last = &fwd.logits[(window.len() - 1) * v..];
        let logits_f64: Vec<f64> = last.iter().map(|&l| l.to_f64()).collect();
        let next = pick_next(&logits_f64, &opts.strategy, rng);
        if opts.eos_id == Some(next) {
            break;
        }
        ids.push(next);
        out.push(next);
    }
    Ok(out)
}
