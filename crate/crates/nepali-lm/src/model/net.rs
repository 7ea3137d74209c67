//! Parameters, forward pass, loss, and the hand-written backward pass.
//!
//! Activation layout is row-major `[batch * time, feature]`. Attention
//! weights live in `[batch, head, t, s]` with the upper triangle (`s > t`)
//! never computed, which is what makes the model causal: position `t` only
//! ever reads positions `s <= t`.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::float::Float;
use super::math::{
    acc_column_sums, add_bias, gelu, gelu_grad, layernorm_backward, layernorm_forward, matmul,
    matmul_acc_at, matmul_acc_bt, LnCache,
};
use super::{ModelConfig, ModelError};

/// Whether dropout masks are sampled. Inference and validation run in
/// [`Mode::Eval`], where the forward pass is a pure function of its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One transformer block's weights. `w*` matrices are `[in, out]` so
/// activations multiply on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    pub wo: Vec<T>,
    pub bo: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// Full parameter set. The token embedding doubles as the output head
/// (weight tying), so there is no separate unembedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    /// `[vocab_size, d_model]`
    pub tok_emb: Vec<T>,
    /// `[context_len, d_model]`
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
}

/// Name and shape of one tensor, in the fixed declaration order shared by
/// [`Parameters::tensors`], the optimizer state, and the checkpoint file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ModelConfig {
    /// Canonical tensor catalogue for this architecture.
    pub fn tensor_descs(&self) -> Vec<TensorDesc> {
        let c = self.d_model;
        let f = self.d_ff;
        let mut out = vec![
            TensorDesc { name: "tok_emb".into(), shape: vec![self.vocab_size, c] },
            TensorDesc { name: "pos_emb".into(), shape: vec![self.context_len, c] },
        ];
        for l in 0..self.n_layers {
            let mut push = |field: &str, shape: Vec<usize>| {
                out.push(TensorDesc { name: format!("layer{l}.{field}"), shape });
            };
            push("ln1_g", vec![c]);
            push("ln1_b", vec![c]);
            push("wq", vec![c, c]);
            push("bq", vec![c]);
            push("wk", vec![c, c]);
            push("bk", vec![c]);
            push("wv", vec![c, c]);
            push("bv", vec![c]);
            push("wo", vec![c, c]);
            push("bo", vec![c]);
            push("ln2_g", vec![c]);
            push("ln2_b", vec![c]);
            push("w1", vec![c, f]);
            push("b1", vec![f]);
            push("w2", vec![f, c]);
            push("b2", vec![c]);
        }
        out.push(TensorDesc { name: "lnf_g".into(), shape: vec![c] });
        out.push(TensorDesc { name: "lnf_b".into(), shape: vec![c] });
        out
    }
}

impl<T: Float> Parameters<T> {
    /// All-zero parameters with the shapes `cfg` dictates. Also the shape of
    /// a gradient or an optimizer moment.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c = cfg.d_model;
        let f = cfg.d_ff;
        Parameters {
            tok_emb: vec![T::ZERO; cfg.vocab_size * c],
            pos_emb: vec![T::ZERO; cfg.context_len * c],
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    ln1_g: vec![T::ZERO; c],
                    ln1_b: vec![T::ZERO; c],
                    wq: vec![T::ZERO; c * c],
                    bq: vec![T::ZERO; c],
                    wk: vec![T::ZERO; c * c],
                    bk: vec![T::ZERO; c],
                    wv: vec![T::ZERO; c * c],
                    bv: vec![T::ZERO; c],
                    wo: vec![T::ZERO; c * c],
                    bo: vec![T::ZERO; c],
                    ln2_g: vec![T::ZERO; c],
                    ln2_b: vec![T::ZERO; c],
                    w1: vec![T::ZERO; c * f],
                    b1: vec![T::ZERO; f],
                    w2: vec![T::ZERO; f * c],
                    b2: vec![T::ZERO; c],
                })
                .collect(),
            lnf_g: vec![T::ZERO; c],
            lnf_b: vec![T::ZERO; c],
        }
    }

    /// Tensors in the same order as [`ModelConfig::tensor_descs`].
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b]);
        out
    }

    /// Mutable view in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b]);
        out
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// One standard normal draw via Box-Muller; consumes exactly two uniforms.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps ln finite
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian(0, `init_std`) for weight matrices and embeddings, zeros for
/// biases and layer norm offsets, ones for layer norm gains.
pub(crate) fn init_params_rng<T: Float>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Parameters<T> {
    let mut params = Parameters::zeros(cfg);
    let descs = cfg.tensor_descs();
    for (desc, tensor) in descs.iter().zip(params.tensors_mut()) {
        let leaf = desc.name.rsplit('.').next().unwrap_or(&desc.name);
        match leaf {
            "ln1_g" | "ln2_g" | "lnf_g" => tensor.fill(T::ONE),
            name if name.starts_with('b') || name.ends_with("_b") => tensor.fill(T::ZERO),
            _ => {
                for v in tensor.iter_mut() {
                    *v = T::from_f64(standard_normal(rng) * cfg.init_std);
                }
            }
        }
    }
    params
}

/// Seeded parameter initialization. The same `(config, seed)` always yields
/// bit-identical parameters.
pub fn init_params<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<T>, ModelError> {
    cfg.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_params_rng(cfg, &mut rng))
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Pre-dropout attention weights, `[b, h, t, s]`, upper triangle zero.
    probs: Vec<T>,
    probs_mask: Option<Vec<T>>,
    ctx: Vec<T>,
    attn_mask: Option<Vec<T>>,
    ln2: LnCache<T>,
    m: Vec<T>,
    h1: Vec<T>,
    g1: Vec<T>,
    mlp_mask: Option<Vec<T>>,
}

struct Cache<T> {
    ids: Vec<u32>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    y: Vec<T>,
}

/// Forward output: logits in `[b * t, vocab]` layout.
pub struct Forward<T> {
    pub logits: Vec<T>,
    pub b: usize,
    pub t: usize,
}

fn draw_mask<T: Float>(len: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep_scale = T::from_f64(1.0 / (1.0 - dropout));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < dropout {
                T::ZERO
            } else {
                keep_scale
            }
        })
        .collect()
}

fn apply_mask<T: Float>(buf: &mut [T], mask: &[T]) {
    for (b, &m) in buf.iter_mut().zip(mask) {
        *b *= m;
    }
}

fn validate_batch(cfg: &ModelConfig, ids: &[u32], b: usize, t: usize) -> Result<(), ModelError> {
    if b == 0 || t == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if t > cfg.context_len {
        return Err(ModelError::SequenceTooLong { len: t, max: cfg.context_len });
    }
    debug_assert_eq!(ids.len(), b * t);
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
    }
    Ok(())
}

fn forward_cached<T: Float>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    ids: &[u32],
    b: usize,
    t: usize,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Forward<T>, Cache<T>), ModelError> {
    validate_batch(cfg, ids, b, t)?;
    let c = cfg.d_model;
    let f = cfg.d_ff;
    let h = cfg.n_heads;
    let hd = cfg.head_dim();
    let v = cfg.vocab_size;
    let rows = b * t;
    let dropout_on = mode == Mode::Train && cfg.dropout > 0.0;
    let mut mask_rng = |len: usize| -> Option<Vec<T>> {
        if dropout_on {
            let rng = rng
                .as_deref_mut()
                .expect("training with dropout requires an RNG");
            Some(draw_mask(len, cfg.dropout, rng))
        } else {
            None
        }
    };

    // Token + position embeddings.
    let mut x = vec![T::ZERO; rows * c];
    for bi in 0..b {
        for ti in 0..t {
            let row = bi * t + ti;
            let id = ids[row] as usize;
            let xr = &mut x[row * c..(row + 1) * c];
            let te = &params.tok_emb[id * c..(id + 1) * c];
            let pe = &params.pos_emb[ti * c..(ti + 1) * c];
            for i in 0..c {
                xr[i] = te[i] + pe[i];
            }
        }
    }
    let emb_mask = mask_rng(rows * c);
    if let Some(mask) = &emb_mask {
        apply_mask(&mut x, mask);
    }

    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);

    for layer in &params.layers {
        // Attention branch: a = LN1(x).
        let mut a = vec![T::ZERO; rows * c];
        let ln1 = layernorm_forward(&mut a, &x, &layer.ln1_g, &layer.ln1_b, rows, c);

        let mut q = vec![T::ZERO; rows * c];
        let mut k = vec![T::ZERO; rows * c];
        let mut vv = vec![T::ZERO; rows * c];
        matmul(&mut q, &a, &layer.wq, rows, c, c);
        add_bias(&mut q, &layer.bq, rows, c);
        matmul(&mut k, &a, &layer.wk, rows, c, c);
        add_bias(&mut k, &layer.bk, rows, c);
        matmul(&mut vv, &a, &layer.wv, rows, c, c);
        add_bias(&mut vv, &layer.bv, rows, c);

        // Causal attention per (batch, head). Scores are scaled by
        // 1/sqrt(head_dim); positions s > t are never touched.
        let mut probs = vec![T::ZERO; b * h * t * t];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let qrow = &q[(bi * t + ti) * c + hi * hd..(bi * t + ti) * c + (hi + 1) * hd];
                    let prow_start = ((bi * h + hi) * t + ti) * t;
                    let prow = &mut probs[prow_start..prow_start + ti + 1];
                    for (si, p) in prow.iter_mut().enumerate() {
                        let krow =
                            &k[(bi * t + si) * c + hi * hd..(bi * t + si) * c + (hi + 1) * hd];
                        let mut s = T::ZERO;
                        for i in 0..hd {
                            s += qrow[i] * krow[i];
                        }
                        *p = s * scale;
                    }
                    super::math::softmax_in_place(prow);
                }
            }
        }

        let probs_mask = mask_rng(b * h * t * t);
        let mut ctx = vec![T::ZERO; rows * c];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let prow_start = ((bi * h + hi) * t + ti) * t;
                    let crow =
                        &mut ctx[(bi * t + ti) * c + hi * hd..(bi * t + ti) * c + (hi + 1) * hd];
                    for si in 0..=ti {
                        let mut p = probs[prow_start + si];
                        if let Some(mask) = &probs_mask {
                            p *= mask[prow_start + si];
                        }
                        let vrow =
                            &vv[(bi * t + si) * c + hi * hd..(bi * t + si) * c + (hi + 1) * hd];
                        for i in 0..hd {
                            crow[i] += p * vrow[i];
                        }
                    }
                }
            }
        }

        let mut attn_out = vec![T::ZERO; rows * c];
        matmul(&mut attn_out, &ctx, &layer.wo, rows, c, c);
        add_bias(&mut attn_out, &layer.bo, rows, c);
        let attn_mask = mask_rng(rows * c);
        if let Some(mask) = &attn_mask {
            apply_mask(&mut attn_out, mask);
        }
        for (xi, &ai) in x.iter_mut().zip(&attn_out) {
            *xi += ai;
        }

        // MLP branch: m = LN2(x), then W1 -> GELU -> W2.
        let mut m = vec![T::ZERO; rows * c];
        let ln2 = layernorm_forward(&mut m, &x, &layer.ln2_g, &layer.ln2_b, rows, c);
        let mut h1 = vec![T::ZERO; rows * f];
        matmul(&mut h1, &m, &layer.w1, rows, c, f);
        add_bias(&mut h1, &layer.b1, rows, f);
        let mut g1 = vec![T::ZERO; rows * f];
        for (g, &hv) in g1.iter_mut().zip(&h1) {
            *g = gelu(hv);
        }
        let mut mlp_out = vec![T::ZERO; rows * c];
        matmul(&mut mlp_out, &g1, &layer.w2, rows, f, c);
        add_bias(&mut mlp_out, &layer.b2, rows, c);
        let mlp_mask = mask_rng(rows * c);
        if let Some(mask) = &mlp_mask {
            apply_mask(&mut mlp_out, mask);
        }
        for (xi, &mi) in x.iter_mut().zip(&mlp_out) {
            *xi += mi;
        }

        layer_caches.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v: vv,
            probs,
            probs_mask,
            ctx,
            attn_mask,
            ln2,
            m,
            h1,
            g1,
            mlp_mask,
        });
    }

    // Final norm and tied output head: logits = LNf(x) @ tok_emb^T.
    let mut y = vec![T::ZERO; rows * c];
    let lnf = layernorm_forward(&mut y, &x, &params.lnf_g, &params.lnf_b, rows, c);
    let mut logits = vec![T::ZERO; rows * v];
    for r in 0..rows {
        let yr = &y[r * c..(r + 1) * c];
        let lrow = &mut logits[r * v..(r + 1) * v];
        for (vi, l) in lrow.iter_mut().enumerate() {
            let erow = &params.tok_emb[vi * c..(vi + 1) * c];
            let mut s = T::ZERO;
            for i in 0..c {
                s += yr[i] * erow[i];
            }
            *l = s;
        }
    }

    Ok((
        Forward { logits, b, t },
        Cache {
            ids: ids.to_vec(),
            emb_mask,
            layers: layer_caches,
            lnf,
            y,
        },
    ))
}

/// Runs the network over a `[b, t]` batch of token ids and returns logits.
/// In [`Mode::Eval`] the result is a deterministic function of parameters
/// and input; [`Mode::Train`] additionally samples dropout from `rng` when
/// the config asks for it.
pub fn forward<T: Float>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    ids: &[u32],
    b: usize,
    t: usize,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward<T>, ModelError> {
    forward_cached(cfg, params, ids, b, t, mode, rng).map(|(f, _)| f)
}

/// Mean next-token negative log likelihood in natural log units.
/// `logits` is `[positions, vocab]`; `targets` pairs with positions.
pub fn cross_entropy_loss<T: Float>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
) -> Result<T, ModelError> {
    let (loss, _) = ce_forward_backward(logits, vocab, targets, None, false)?;
    Ok(loss)
}

/// As [`cross_entropy_loss`] but averaging only over positions whose mask
/// entry is true. Errors when the mask excludes everything.
pub(crate) fn masked_cross_entropy<T: Float>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
) -> Result<T, ModelError> {
    let (loss, _) = ce_forward_backward(logits, vocab, targets, Some(mask), false)?;
    Ok(loss)
}

/// Computes masked-mean cross entropy and, when `want_grad`, the logit
/// gradient scaled so downstream gradients are for the mean loss.
fn ce_forward_backward<T: Float>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    mask: Option<&[bool]>,
    want_grad: bool,
) -> Result<(T, Vec<T>), ModelError> {
    let positions = targets.len();
    if positions == 0 {
        return Err(ModelError::EmptyBatch);
    }
    debug_assert_eq!(logits.len(), positions * vocab);
    if let Some(m) = mask {
        debug_assert_eq!(m.len(), positions);
    }
    let counted = match mask {
        Some(m) => m.iter().filter(|&&x| x).count(),
        None => positions,
    };
    if counted == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let inv_count = T::from_f64(1.0 / counted as f64);
    let mut loss = T::ZERO;
    let mut dlogits = if want_grad {
        vec![T::ZERO; logits.len()]
    } else {
        Vec::new()
    };
    for r in 0..positions {
        if let Some(m) = mask {
            if !m[r] {
                continue;
            }
        }
        let target = targets[r] as usize;
        if target >= vocab {
            return Err(ModelError::TokenOutOfRange { id: targets[r], vocab });
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut max = row[0];
        for &x in row {
            max = max.maximum(x);
        }
        let mut sum = T::ZERO;
        for &x in row {
            sum += (x - max).exp();
        }
        let log_z = sum.ln() + max;
        loss += (log_z - row[target]) * inv_count;
        if want_grad {
            let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
            let inv_sum = T::ONE / sum;
            for (d, &x) in drow.iter_mut().zip(row) {
                *d = (x - max).exp() * inv_sum * inv_count;
            }
            drow[target] -= inv_count;
        }
    }
    Ok((loss, dlogits))
}

/// Full training step math: forward, masked-mean cross entropy against
/// `targets`, and backpropagation through every parameter. Returns the loss
/// and a gradient with the same shape as `params`.
///
/// `mask`, when given, selects which positions contribute to the loss
/// (padding and prompt positions are excluded by fine-tuning).
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads<T: Float>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    ids: &[u32],
    b: usize,
    t: usize,
    targets: &[u32],
    mask: Option<&[bool]>,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(T, Parameters<T>), ModelError> {
    let (fwd, cache) = forward_cached(cfg, params, ids, b, t, mode, rng)?;
    let rows = b * t;
    let c = cfg.d_model;
    let f = cfg.d_ff;
    let h = cfg.n_heads;
    let hd = cfg.head_dim();
    let v = cfg.vocab_size;
    debug_assert_eq!(targets.len(), rows);

    let (loss, dlogits) = ce_forward_backward(&fwd.logits, v, targets, mask, true)?;
    let mut grads = Parameters::<T>::zeros(cfg);

    // Tied head: logits = y @ tok_emb^T, so the embedding gradient picks up
    // the head term now and the input-lookup term at the very end.
    let mut dy = vec![T::ZERO; rows * c];
    matmul(&mut dy, &dlogits, &params.tok_emb, rows, v, c);
    matmul_acc_at(&mut grads.tok_emb, &dlogits, &cache.y, rows, v, c);

    let mut dx = vec![T::ZERO; rows * c];
    layernorm_backward(
        &mut dx,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
        &dy,
        &cache.lnf,
        &params.lnf_g,
        rows,
        c,
    );

    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    for (layer, (lc, lg)) in params
        .layers
        .iter()
        .zip(cache.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        // MLP branch backward.
        let mut dmlp = dx.clone();
        if let Some(mask) = &lc.mlp_mask {
            apply_mask(&mut dmlp, mask);
        }
        let mut dg1 = vec![T::ZERO; rows * f];
        matmul_acc_bt(&mut dg1, &dmlp, &layer.w2, rows, f, c);
        matmul_acc_at(&mut lg.w2, &lc.g1, &dmlp, rows, f, c);
        acc_column_sums(&mut lg.b2, &dmlp, rows, c);
        let mut dh1 = dg1;
        for (d, &hv) in dh1.iter_mut().zip(&lc.h1) {
            *d *= gelu_grad(hv);
        }
        let mut dm = vec![T::ZERO; rows * c];
        matmul_acc_bt(&mut dm, &dh1, &layer.w1, rows, c, f);
        matmul_acc_at(&mut lg.w1, &lc.m, &dh1, rows, c, f);
        acc_column_sums(&mut lg.b1, &dh1, rows, f);
        // Residual: dx (direct path) plus LN2 backward of the branch.
        layernorm_backward(
            &mut dx,
            &mut lg.ln2_g,
            &mut lg.ln2_b,
            &dm,
            &lc.ln2,
            &layer.ln2_g,
            rows,
            c,
        );

        // Attention branch backward.
        let mut dattn = dx.clone();
        if let Some(mask) = &lc.attn_mask {
            apply_mask(&mut dattn, mask);
        }
        let mut dctx = vec![T::ZERO; rows * c];
        matmul_acc_bt(&mut dctx, &dattn, &layer.wo, rows, c, c);
        matmul_acc_at(&mut lg.wo, &lc.ctx, &dattn, rows, c, c);
        acc_column_sums(&mut lg.bo, &dattn, rows, c);

        let mut dq = vec![T::ZERO; rows * c];
        let mut dk = vec![T::ZERO; rows * c];
        let mut dv = vec![T::ZERO; rows * c];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let prow_start = ((bi * h + hi) * t + ti) * t;
                    let dcrow =
                        &dctx[(bi * t + ti) * c + hi * hd..(bi * t + ti) * c + (hi + 1) * hd];
                    // d(post-dropout probs) and dv.
                    let mut dprobs = vec![T::ZERO; ti + 1];
                    for si in 0..=ti {
                        let vrow =
                            &lc.v[(bi * t + si) * c + hi * hd..(bi * t + si) * c + (hi + 1) * hd];
                        let mut dp = T::ZERO;
                        for i in 0..hd {
                            dp += dcrow[i] * vrow[i];
                        }
                        let mut p_eff = lc.probs[prow_start + si];
                        if let Some(mask) = &lc.probs_mask {
                            let mv = mask[prow_start + si];
                            dp *= mv;
                            p_eff *= mv;
                        }
                        dprobs[si] = dp;
                        let dvrow = &mut dv
                            [(bi * t + si) * c + hi * hd..(bi * t + si) * c + (hi + 1) * hd];
                        for i in 0..hd {
                            dvrow[i] += p_eff * dcrow[i];
                        }
                    }
                    // Softmax backward over the causal row.
                    let mut dot = T::ZERO;
                    for (si, &dp) in dprobs.iter().enumerate().take(ti + 1) {
                        dot += lc.probs[prow_start + si] * dp;
                    }
                    let qrow_range =
                        (bi * t + ti) * c + hi * hd..(bi * t + ti) * c + (hi + 1) * hd;
                    for si in 0..=ti {
                        let dscore = lc.probs[prow_start + si] * (dprobs[si] - dot) * scale;
                        let krow =
                            &lc.k[(bi * t + si) * c + hi * hd..(bi * t + si) * c + (hi + 1) * hd];
                        let dqrow = &mut dq[qrow_range.clone()];
                        for i in 0..hd {
                            dqrow[i] += dscore * krow[i];
                        }
                        let qrow = &lc.q[qrow_range.clone()];
                        let dkrow = &mut dk
                            [(bi * t + si) * c + hi * hd..(bi * t + si) * c + (hi + 1) * hd];
                        for i in 0..hd {
                            dkrow[i] += dscore * qrow[i];
                        }
                    }
                }
            }
        }

        let mut da = vec![T::ZERO; rows * c];
        matmul_acc_bt(&mut da, &dq, &layer.wq, rows, c, c);
        matmul_acc_at(&mut lg.wq, &lc.a, &dq, rows, c, c);
        acc_column_sums(&mut lg.bq, &dq, rows, c);
        matmul_acc_bt(&mut da, &dk, &layer.wk, rows, c, c);
        matmul_acc_at(&mut lg.wk, &lc.a, &dk, rows, c, c);
        acc_column_sums(&mut lg.bk, &dk, rows, c);
        matmul_acc_bt(&mut da, &dv, &layer.wv, rows, c, c);
        matmul_acc_at(&mut lg.wv, &lc.a, &dv, rows, c, c);
        acc_column_sums(&mut lg.bv, &dv, rows, c);

        layernorm_backward(
            &mut dx,
            &mut lg.ln1_g,
            &mut lg.ln1_b,
            &da,
            &lc.ln1,
            &layer.ln1_g,
            rows,
            c,
        );
    }

    // Embedding backward: dropout mask, then scatter into token rows and
    // sum over the batch for position rows.
    if let Some(mask) = &cache.emb_mask {
        apply_mask(&mut dx, mask);
    }
    for bi in 0..b {
        for ti in 0..t {
            let row = bi * t + ti;
            let id = cache.ids[row] as usize;
            let dxr = &dx[row * c..(row + 1) * c];
            let te = &mut grads.tok_emb[id * c..(id + 1) * c];
            for i in 0..c {
                te[i] += dxr[i];
            }
            let pe = &mut grads.pos_emb[ti * c..(ti + 1) * c];
            for i in 0..c {
                pe[i] += dxr[i];
            }
        }
    }

    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_len: 8,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            dropout: 0.0,
            init_std: 0.02,
        }
    }

    #[test]
    fn init_fills_weights_biases_and_gains_as_documented() {
        let cfg = ModelConfig::tiny(64);
        let params = init_params::<f64>(&cfg, 7).unwrap();
        assert!(params.layers[0].bq.iter().all(|&x| x == 0.0));
        assert!(params.layers[0].ln1_b.iter().all(|&x| x == 0.0));
        assert!(params.lnf_b.iter().all(|&x| x == 0.0));
        assert!(params.layers[0].ln1_g.iter().all(|&x| x == 1.0));
        assert!(params.lnf_g.iter().all(|&x| x == 1.0));
        let w = &params.layers[0].wq;
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let std: f64 =
            (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 3e-3, "mean {mean}");
        assert!((std - 0.02).abs() < 3e-3, "std {std}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let a = init_params::<f64>(&cfg, 42).unwrap();
        let b = init_params::<f64>(&cfg, 42).unwrap();
        let c = init_params::<f64>(&cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tensor_descs_match_actual_tensor_lengths() {
        let cfg = small_cfg();
        let params = Parameters::<f32>::zeros(&cfg);
        let descs = cfg.tensor_descs();
        let tensors = params.tensors();
        assert_eq!(descs.len(), tensors.len());
        for (d, t) in descs.iter().zip(&tensors) {
            let numel: usize = d.shape.iter().product();
            assert_eq!(numel, t.len(), "tensor {}", d.name);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 3).unwrap();
        let ids: Vec<u32> = vec![1, 4, 2, 9, 5, 5, 0, 7];
        let (_, cache) =
            forward_cached(&cfg, &params, &ids, 1, 8, Mode::Eval, None).unwrap();
        for lc in &cache.layers {
            for hi in 0..cfg.n_heads {
                for ti in 0..8 {
                    let start = (hi * 8 + ti) * 8;
                    let row = &lc.probs[start..start + 8];
                    let sum: f64 = row[..=ti].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                    // Future positions must carry exactly zero weight.
                    assert!(row[ti + 1..].iter().all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn logits_before_a_perturbed_position_are_bitwise_unchanged() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 11).unwrap();
        let ids: Vec<u32> = vec![1, 4, 2, 9, 5, 5, 0, 7];
        let base = forward(&cfg, &params, &ids, 1, 8, Mode::Eval, None).unwrap();
        let mut perturbed = ids.clone();
        perturbed[5] = 10;
        let after = forward(&cfg, &params, &perturbed, 1, 8, Mode::Eval, None).unwrap();
        let v = cfg.vocab_size;
        assert_eq!(&base.logits[..5 * v], &after.logits[..5 * v]);
        assert_ne!(&base.logits[5 * v..6 * v], &after.logits[5 * v..6 * v]);
    }

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let vocab = 10_000;
        let logits = vec![0.25f64; 2 * vocab];
        let loss = cross_entropy_loss(&logits, vocab, &[3, 9_999]).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-9, "loss {loss}");
        assert!((loss - 9.21034).abs() < 1e-4);
    }

    #[test]
    fn loss_rejects_out_of_range_targets() {
        let logits = vec![0.0f64; 11];
        assert!(matches!(
            cross_entropy_loss(&logits, 11, &[11]),
            Err(ModelError::TokenOutOfRange { id: 11, .. })
        ));
    }

    #[test]
    fn forward_rejects_oversized_sequences_and_bad_ids() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 5).unwrap();
        let long: Vec<u32> = vec![0; 9];
        assert!(matches!(
            forward(&cfg, &params, &long, 1, 9, Mode::Eval, None),
            Err(ModelError::SequenceTooLong { len: 9, max: 8 })
        ));
        let bad = vec![0u32, 42, 1, 1];
        assert!(matches!(
            forward(&cfg, &params, &bad, 1, 4, Mode::Eval, None),
            Err(ModelError::TokenOutOfRange { id: 42, .. })
        ));
    }

    /// Central finite differences against the analytic gradient for every
    /// parameter, in f64. Relative error is the symmetric form
    /// |a - n| / max(|a| + |n|, 1e-2). The floor is sized to the method,
    /// not to zero-guarding alone: central differences at h = 1e-4 carry
    /// O(h^2 f''') truncation of up to ~1e-6 absolute on this model no
    /// matter how small the coordinate's gradient is, so coordinates below
    /// the floor are held to the 1e-6 absolute tolerance the step size can
    /// certify, and everything larger to the full relative bound.
    fn check_gradients(seed: u64) -> f64 {
        let cfg = small_cfg();
        let mut params = init_params::<f64>(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let t = 8;
        let ids: Vec<u32> = (0..t).map(|_| rng.random_range(0..11) as u32).collect();
        let targets: Vec<u32> = (0..t).map(|_| rng.random_range(0..11) as u32).collect();

        let (_, grads) = loss_and_grads(
            &cfg, &params, &ids, 1, t, &targets, None, Mode::Eval, None,
        )
        .unwrap();

        let h = 1e-4;
        let mut max_rel = 0.0f64;
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            let len = params.tensors()[ti].len();
            for i in 0..len {
                let orig = params.tensors()[ti][i];
                params.tensors_mut()[ti][i] = orig + h;
                let (lp, _) = forward_loss(&cfg, &params, &ids, &targets);
                params.tensors_mut()[ti][i] = orig - h;
                let (lm, _) = forward_loss(&cfg, &params, &ids, &targets);
                params.tensors_mut()[ti][i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads.tensors()[ti][i];
                let denom = (analytic.abs() + numeric.abs()).max(1e-2);
                let rel = (numeric - analytic).abs() / denom;
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        max_rel
    }

    fn forward_loss(
        cfg: &ModelConfig,
        params: &Parameters<f64>,
        ids: &[u32],
        targets: &[u32],
    ) -> (f64, ()) {
        let fwd = forward(cfg, params, ids, 1, ids.len(), Mode::Eval, None).unwrap();
        (
            cross_entropy_loss(&fwd.logits, cfg.vocab_size, targets).unwrap(),
            (),
        )
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let max_rel = check_gradients(1);
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn unused_position_rows_get_zero_gradient() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 2).unwrap();
        let ids = vec![1u32, 2, 3];
        let targets = vec![2u32, 3, 4];
        let (_, grads) =
            loss_and_grads(&cfg, &params, &ids, 1, 3, &targets, None, Mode::Eval, None).unwrap();
        let c = cfg.d_model;
        // Positions 3.. were never fed, so their embedding rows are untouched.
        assert!(grads.pos_emb[3 * c..].iter().all(|&g| g == 0.0));
        assert!(grads.pos_emb[..3 * c].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn masked_positions_do_not_contribute_to_loss_or_gradient() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 9).unwrap();
        let ids = vec![1u32, 2, 3, 4];
        let targets = vec![2u32, 3, 4, 5];
        let mask = vec![true, true, false, false];
        let (loss_masked, _) = loss_and_grads(
            &cfg, &params, &ids, 1, 4, &targets, Some(&mask), Mode::Eval, None,
        )
        .unwrap();
        // Against a manual mean over the first two positions only.
        let fwd = forward(&cfg, &params, &ids, 1, 4, Mode::Eval, None).unwrap();
        let v = cfg.vocab_size;
        let l0 = cross_entropy_loss(&fwd.logits[..v], v, &targets[..1]).unwrap();
        let l1 = cross_entropy_loss(&fwd.logits[v..2 * v], v, &targets[1..2]).unwrap();
        assert!((loss_masked - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_draws_only_in_train_mode_and_changes_activations() {
        let mut cfg = small_cfg();
        cfg.dropout = 0.5;
        let params = init_params::<f64>(&cfg, 4).unwrap();
        let ids = vec![1u32, 2, 3, 4];
        let eval = forward(&cfg, &params, &ids, 1, 4, Mode::Eval, None).unwrap();
        let eval2 = forward(&cfg, &params, &ids, 1, 4, Mode::Eval, None).unwrap();
        assert_eq!(eval.logits, eval2.logits, "eval must not use dropout");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train =
            forward(&cfg, &params, &ids, 1, 4, Mode::Train, Some(&mut rng)).unwrap();
        assert_ne!(eval.logits, train.logits, "dropout must perturb training");
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let train2 =
            forward(&cfg, &params, &ids, 1, 4, Mode::Train, Some(&mut rng2)).unwrap();
        assert_eq!(train.logits, train2.logits, "same rng state, same masks");
    }
}
