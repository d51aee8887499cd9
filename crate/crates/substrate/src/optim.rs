//! AdamW, the warmup + cosine learning-rate schedule, and parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::store::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, weight_decay: 1e-2, eps: 1e-8 }
    }
}

/// First/second moments for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParameterStore<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One AdamW update with decoupled weight decay (`p *= 1 - lr * wd`) and
/// bias-corrected moments.
pub fn adamw_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &ParameterStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in iter {
            *p *= decay;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mh = *m * inv_bc1;
            let vh = *v * inv_bc2;
            *p -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * live`.
pub fn ema_update<T: Real>(ema: &mut ParameterStore<T>, live: &ParameterStore<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Invalid(format!("ema decay {decay} outside [0, 1]")));
    }
    ema.check_compatible(live)?;
    let (d, one_d) = (T::lit(decay), T::lit(1.0 - decay));
    for ((_, e), (_, l)) in ema.iter_mut().zip(live.iter()) {
        for (e, &l) in e.data_mut().iter_mut().zip(l.data()) {
            *e = d * *e + one_d * l;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_final` at
/// `total_steps`.
pub fn cosine_lr(step: u64, warmup_steps: u64, total_steps: u64, lr_peak: f64, lr_final: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::Invalid(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!("step {step} beyond total_steps {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(lr_peak * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(lr_final);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(lr_final + 0.5 * (lr_peak - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
