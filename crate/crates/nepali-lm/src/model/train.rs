//! Causal LM training loop, window packing, and perplexity.
//!
//! Everything here is deterministic given `(config, seed, stream)`: one
//! ChaCha8 generator drives init, per-epoch shuffling, and dropout in a
//! fixed draw order, and its full state travels inside checkpoints, so a
//! run split across resumes is bit-identical to an uninterrupted one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::checkpoint::Checkpoint;
use super::float::Float;
use super::net::{cross_entropy_loss, forward, init_params_rng, loss_and_grads, Mode, Parameters};
use super::{ModelConfig, ModelError, TrainConfig};

/// Full ChaCha8 generator state: seed, stream, and position. Restoring it
/// resumes the exact draw sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Splits a token stream into training windows of `context_len + 1` tokens
/// with stride `context_len`, so consecutive windows share exactly one
/// token and every next-token position is predicted once. The ragged tail
/// is dropped.
pub fn pack_windows(stream: &[u32], context_len: usize) -> Result<Vec<Vec<u32>>, ModelError> {
    let required = context_len + 1;
    if stream.len() < required {
        return Err(ModelError::StreamTooShort { len: stream.len(), required });
    }
    let n = (stream.len() - 1) / context_len;
    Ok((0..n)
        .map(|i| stream[i * context_len..i * context_len + required].to_vec())
        .collect())
}

/// Loss and perplexity for one completed epoch. Wall-clock time is kept
/// out on purpose: this record is embedded in checkpoints, which must be
/// bit-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps completed by the end of this epoch.
    pub step: u64,
    pub train_loss: f64,
    pub train_ppl: f64,
    pub val_loss: Option<f64>,
    pub val_ppl: Option<f64>,
}

/// What a training call hands back: the final state and the state after
/// the epoch with the lowest validation loss. With no validation split, or
/// when no epoch in this call improved on the resumed history, `best` is
/// the same state as `last`.
pub struct TrainOutcome<T> {
    pub last: Checkpoint<T>,
    pub best: Checkpoint<T>,
    pub best_val: Option<f64>,
}

/// Perplexity is the exponential of mean next-token negative log
/// likelihood (natural log).
pub fn perplexity_from_loss(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

fn batch_from_windows(windows: &[&[u32]], context_len: usize) -> (Vec<u32>, Vec<u32>) {
    let b = windows.len();
    let mut ids = Vec::with_capacity(b * context_len);
    let mut targets = Vec::with_capacity(b * context_len);
    for w in windows {
        debug_assert_eq!(w.len(), context_len + 1);
        ids.extend_from_slice(&w[..context_len]);
        targets.extend_from_slice(&w[1..]);
    }
    (ids, targets)
}

/// Mean NLL over every position of `windows`, in eval mode.
fn eval_mean_nll<T: Float>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    windows: &[Vec<u32>],
    batch_size: usize,
) -> Result<Option<f64>, ModelError> {
    if windows.is_empty() {
        return Ok(None);
    }
    let ctx = cfg.context_len;
    let mut total = 0.0f64;
    let mut positions = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&[u32]> = chunk.iter().map(|w| w.as_slice()).collect();
        let (ids, targets) = batch_from_windows(&refs, ctx);
        let fwd = forward(cfg, params, &ids, chunk.len(), ctx, Mode::Eval, None)?;
        let loss = cross_entropy_loss(&fwd.logits, cfg.vocab_size, &targets)?;
        total += loss.to_f64() * targets.len() as f64;
        positions += targets.len();
    }
    Ok(Some(total / positions as f64))
}

/// Perplexity of `params` over a token stream, predicting every position
/// after the first exactly once. Full windows run at `context_len`; the
/// ragged tail, unlike in training, is evaluated too (as one shorter
/// sequence) so the number never silently ignores data.
pub fn perplexity<T: Float>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    stream: &[u32],
    batch_size: usize,
) -> Result<f64, ModelError> {
    cfg.validate()?;
    if stream.len() < 2 {
        return Err(ModelError::StreamTooShort { len: stream.len(), required: 2 });
    }
    let ctx = cfg.context_len;
    let n_full = (stream.len() - 1) / ctx;
    let mut total = 0.0f64;
    let mut positions = 0usize;
    let full: Vec<Vec<u32>> = (0..n_full)
        .map(|i| stream[i * ctx..i * ctx + ctx + 1].to_vec())
        .collect();
    if let Some(nll) = eval_mean_nll(cfg, params, &full, batch_size)? {
        total += nll * (n_full * ctx) as f64;
        positions += n_full * ctx;
    }
    let tail = &stream[n_full * ctx..];
    if tail.len() >= 2 {
        let t = tail.len() - 1;
        let fwd = forward(cfg, params, &tail[..t], 1, t, Mode::Eval, None)?;
        let loss = cross_entropy_loss(&fwd.logits, cfg.vocab_size, &tail[1..])?;
        total += loss.to_f64() * t as f64;
        positions += t;
    }
    Ok(perplexity_from_loss(total / positions as f64))
}

/// Trains a causal LM on `stream` until `tc.epochs` total epochs are done.
///
/// `val_fraction` carves validation windows off the tail of the stream
/// (at least one window each side when positive). `resume` continues from
/// a checkpoint: `tc.epochs` counts total epochs including the resumed
/// ones, and the result is bit-identical to never having stopped.
/// `on_epoch` sees each epoch's metrics and may return `false` to stop
/// early; the returned state still reflects the epochs that ran.
pub fn train_clm<T: Float>(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    stream: &[u32],
    val_fraction: f64,
    resume: Option<Checkpoint<T>>,
    mut on_epoch: Option<&mut dyn FnMut(&EpochMetrics) -> bool>,
) -> Result<TrainOutcome<T>, ModelError> {
    cfg.validate()?;
    let windows = pack_windows(stream, cfg.context_len)?;
    let n = windows.len();
    let n_val = if val_fraction > 0.0 && n >= 2 {
        ((n as f64 * val_fraction).floor() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (train_windows, val_windows) = windows.split_at(n - n_val);

    let (mut params, mut opt, mut rng, mut history) = match resume {
        Some(ck) => {
            if ck.config != *cfg {
                return Err(ModelError::ConfigMismatch);
            }
            (ck.params, ck.opt, ck.rng.restore(), ck.history)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            let params = init_params_rng::<T>(cfg, &mut rng);
            (params, AdamState::new(cfg), rng, Vec::new())
        }
    };

    let completed = history.len();
    let mut best_val = history
        .iter()
        .filter_map(|m| m.val_loss)
        .fold(f64::INFINITY, f64::min);
    let mut best: Option<Checkpoint<T>> = None;
    let ctx = cfg.context_len;

    for epoch in completed..tc.epochs {
        // Shuffle a fresh identity permutation so the epoch's batch order
        // is a function of RNG state alone; resuming mid-run would
        // otherwise see a different starting arrangement.
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut rng);
        let mut total_nll = 0.0f64;
        let mut positions = 0usize;
        for chunk in order.chunks(tc.train_batch_size.max(1)) {
            let refs: Vec<&[u32]> = chunk.iter().map(|&i| train_windows[i].as_slice()).collect();
            let (ids, targets) = batch_from_windows(&refs, ctx);
            let (loss, grads) = loss_and_grads(
                cfg,
                &params,
                &ids,
                chunk.len(),
                ctx,
                &targets,
                None,
                Mode::Train,
                Some(&mut rng),
            )?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step: opt.step + 1 });
            }
            adam_step(&mut params, &grads, &mut opt, tc);
            total_nll += loss * targets.len() as f64;
            positions += targets.len();
        }
        let train_loss = total_nll / positions as f64;
        let val_loss = eval_mean_nll(cfg, &params, val_windows, tc.eval_batch_size)?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            step: opt.step,
            train_loss,
            train_ppl: perplexity_from_loss(train_loss),
            val_loss,
            val_ppl: val_loss.map(perplexity_from_loss),
        };
        history.push(metrics.clone());
        if let Some(vl) = val_loss {
            if vl < best_val {
                best_val = vl;
                best = Some(Checkpoint {
                    config: *cfg,
                    rng: RngState::capture(&rng),
                    params: params.clone(),
                    opt: opt.clone(),
                    history: history.clone(),
                });
            }
        }
        if let Some(cb) = on_epoch.as_mut() {
            if !cb(&metrics) {
                break;
            }
        }
    }

    let last = Checkpoint {
        config: *cfg,
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
