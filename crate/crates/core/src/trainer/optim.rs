//! AdamW with per-group decoupled weight decay, and the warmup + cosine
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{DecayGroup, Params};
use crate::scalar::Scalar;
use crate::trainer::config::TrainConfig;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Decay rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightDecay {
    pub codebook: f64,
    pub weights: f64,
}

impl WeightDecay {
    pub fn rate(&self, group: DecayGroup) -> f64 {
        match group {
            DecayGroup::Codebook => self.codebook,
            DecayGroup::Weights => self.weights,
            DecayGroup::None => 0.0,
        }
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW step: `θ ← θ − lr·λ·θ`, then the bias-corrected Adam update.
/// Gradients are checked for finiteness before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    decay: &WeightDecay,
) -> Result<()> {
    for (name, _, g) in grads.tensors() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { group: name.to_string() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - BETA1.powi(t));
    let bc2 = T::lit(1.0 - BETA2.powi(t));
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let eps = T::lit(ADAM_EPS);
    let lr_t = T::lit(lr);
    let params_t = params.tensors_mut();
    let grads_t = grads.tensors();
    let m_t = state.m.tensors_mut();
    let v_t = state.v.tensors_mut();
    for ((((_, group, p), (_, _, g)), (_, _, m)), (_, _, v)) in params_t.into_iter().zip(grads_t).zip(m_t).zip(v_t) {
        let keep = T::one() - lr_t * T::lit(decay.rate(group));
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            p[i] *= keep;
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to exactly 0 at
/// `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let total = config.total_steps;
    let warmup = config.warmup_steps;
    if total == 0 || step >= total {
        return 0.0;
    }
    if step <= warmup {
        if warmup == 0 {
            return config.lr_peak;
        }
        return config.lr_peak * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    config.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
