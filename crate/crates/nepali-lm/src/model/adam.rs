//! Adam with bias correction and decoupled weight decay.

use super::float::Float;
use super::net::Parameters;
use super::{ModelConfig, TrainConfig};

/// First and second moment estimates plus the step counter. Shapes mirror
/// the parameters exactly, so the canonical tensor order applies here too.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            m: Parameters::zeros(cfg),
            v: Parameters::zeros(cfg),
            step: 0,
        }
    }
}

/// One optimizer step, in place.
///
/// Decoupled weight decay shrinks the parameter directly and is applied
/// before the moment update, so the decay never leaks into `m` or `v`.
pub fn adam_step<T: Float>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut AdamState<T>,
    tc: &TrainConfig,
) {
    state.step += 1;
    let lr = T::from_f64(tc.learning_rate);
    adam_step_with_lr(params, grads, state, tc, lr);
}

/// As [`adam_step`] but with an explicit learning rate for this step,
/// which is how warmup schedules feed in. `state.step` must already have
/// been advanced by the caller when using this directly.
pub(crate) fn adam_step_with_lr<T: Float>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut AdamState<T>,
    tc: &TrainConfig,
    lr: T,
) {
    let beta1 = T::from_f64(tc.beta1);
    let beta2 = T::from_f64(tc.beta2);
    let eps = T::from_f64(tc.eps);
    let one = T::ONE;
    let t = state.step as i32;
    let bc1 = T::ONE / (one - T::from_f64(tc.beta1.powi(t)));
    let bc2 = T::ONE / (one - T::from_f64(tc.beta2.powi(t)));
    let wd = T::from_f64(tc.weight_decay);

    let mut p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    for ti in 0..p_tensors.len() {
        let p = &mut p_tensors[ti];
        let g = g_tensors[ti];
        let m = &mut m_tensors[ti];
        let v = &mut v_tensors[ti];
        for i in 0..p.len() {
            let mut w = p[i];
            if tc.weight_decay != 0.0 {
                w -= lr * wd * w;
            }
            let mi = beta1 * m[i] + (one - beta1) * g[i];
            let vi = beta2 * v[i] + (one - beta2) * g[i] * g[i];
            m[i] = mi;
            v[i] = vi;
            let m_hat = mi * bc1;
            let v_hat = vi * bc2;
            p[i] = w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
