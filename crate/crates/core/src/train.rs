//! Shared optimization loop: cosine learning rate with warmup, optional
//! gradient clipping, AdamW, divergence detection and CSV step logs.

use std::path::Path;

use distill_substrate::{adamw_step, cosine_lr, AdamWConfig, OptimizerState, ParameterStore, Real};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_frac: f64,
    pub grad_clip: Option<f64>,
    pub adamw: AdamWConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr_peak: 1e-3,
            lr_final: 1e-4,
            warmup_frac: 0.01,
            grad_clip: Some(1.0),
            adamw: AdamWConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config { path: path.into(), message: m.into() });
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive");
        }
        if !(self.lr_peak > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.steps as f64 * self.warmup_frac).round() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        Ok(cosine_lr(step, self.warmup_steps(), self.steps, self.lr_peak, self.lr_final)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Scales `grads` down to `max_norm` if larger; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParameterStore<T>, max_norm: Option<f64>) -> f64 {
    let norm = grads.global_norm();
    if let Some(c) = max_norm {
        if norm > c {
            grads.scale(T::lit(c / norm));
        }
    }
    norm
}

pub fn check_loss(step: u64, what: &str, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(LabError::Divergence { step, detail: format!("{what} loss {loss}") });
    }
    Ok(())
}

/// Runs `cfg.steps` updates. `loss_fn(step, params)` returns the loss and
/// its gradient; `after(step, record, params)` runs after each update.
pub fn optimize<T, L, A>(
    params: &mut ParameterStore<T>,
    cfg: &OptimConfig,
    what: &str,
    mut loss_fn: L,
    mut after: A,
) -> Result<Vec<StepRecord>>
where
    T: Real,
    L: FnMut(u64, &ParameterStore<T>) -> Result<(f64, ParameterStore<T>)>,
    A: FnMut(u64, &StepRecord, &ParameterStore<T>) -> Result<()>,
{
    let mut state = OptimizerState::new(params);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let (loss, mut grads) = loss_fn(step, params)?;
        check_loss(step, what, loss)?;
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.lr_at(step)?;
        adamw_step(params, &grads, &mut state, lr, &cfg.adamw)
            .map_err(|e| LabError::Divergence { step, detail: format!("{what}: {e}") })?;
        let rec = StepRecord { step, loss, lr, grad_norm };
        after(step, &rec, params)?;
        if step % 100 == 0 {
            log::debug!("{what} step {step}: loss {loss:.5} lr {lr:.2e} |g| {grad_norm:.3}");
        }
        log.push(rec);
    }
    Ok(log)
}

/// Writes `step,loss,lr,grad_norm` rows.
pub fn write_step_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "lr", "grad_norm"])?;
    for r in log {
        w.write_record(&[r.step.to_string(), r.loss.to_string(), r.lr.to_string(), r.grad_norm.to_string()])?;
    }
    w.flush().map_err(|e| LabError::io(path, e))?;
    Ok(())
}

