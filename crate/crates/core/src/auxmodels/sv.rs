//! Latent speaker embedder: frame network, mean pooling and a projection to
//! a unit-norm embedding. Trained as a speaker classifier whose logits are a
//! scaled linear read-out of the normalized embedding.

use std::sync::Arc;

use distill_substrate::{Bound, ParameterStore, Real, Segments, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::latent::{pack, LatentSequence};
use crate::nets::blocks::{self, Init};
use crate::rng;
use crate::train::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvConfig {
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub logit_scale: f64,
    pub noise_aug: f64,
    pub optim: OptimConfig,
}

impl Default for SvConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            ff_dim: 64,
            heads: 2,
            layers: 1,
            embed_dim: 16,
            logit_scale: 10.0,
            noise_aug: 0.05,
            optim: OptimConfig { steps: 1000, batch: 32, lr_peak: 3e-3, lr_final: 1e-4, ..Default::default() },
        }
    }
}

impl SvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || self.embed_dim == 0 {
            return Err(LabError::Config { path: "sv.dim".into(), message: "dim must be a multiple of heads".into() });
        }
        self.optim.validate("sv.optim")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSv {
    pub cfg: SvConfig,
    pub latent_dim: usize,
    pub num_speakers: usize,
}

/// Norm below which a pooled representation has no direction.
const MIN_NORM: f64 = 1e-12;

impl LatentSv {
    pub fn new(cfg: SvConfig, latent_dim: usize, num_speakers: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, latent_dim, num_speakers })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let d = self.cfg.dim;
        let mut init = Init::new(rng::stream(seed, "sv-init", 0));
        init.linear("in_proj", self.latent_dim, d);
        init.linear("frame", d, d);
        for i in 0..self.cfg.layers {
            blocks::init_encoder_layer(&mut init, &format!("layer.{i}"), d, self.cfg.ff_dim);
        }
        init.linear("proj", d, self.cfg.embed_dim);
        init.weight("classifier", self.cfg.embed_dim, self.num_speakers);
        init.finish()
    }

    /// Unit-norm embeddings (`B x E`).
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, seg: &Arc<Segments>) -> Result<Var> {
        let h = blocks::linear(tape, p, "in_proj", x);
        let h = tape.silu(h);
        let h = blocks::linear(tape, p, "frame", h);
        let mut h = tape.silu(h);
        for i in 0..self.cfg.layers {
            h = blocks::encoder_layer(tape, p, &format!("layer.{i}"), h, seg, self.cfg.heads);
        }
        let pooled = tape.seg_mean(h, seg);
        let z = blocks::linear(tape, p, "proj", pooled);
        let e = self.cfg.embed_dim;
        for (b, row) in tape.value(z).chunks(e).enumerate() {
            let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if n < MIN_NORM {
                return Err(LabError::invalid(format!("speaker representation of sample {b} has zero norm")));
            }
        }
        Ok(tape.l2_normalize_rows(z))
    }

    /// Mean cross-entropy of the speaker classifier.
    pub fn class_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        seg: &Arc<Segments>,
        speakers: &[usize],
    ) -> Result<Var> {
        let e = self.embed(tape, p, x, seg)?;
        let logits = tape.matmul(e, p.get("classifier"));
        let logits = tape.scale(logits, T::lit(self.cfg.logit_scale));
        let lp = tape.log_softmax(logits);
        let m = self.num_speakers;
        let mut onehot = vec![T::zero(); speakers.len() * m];
        for (b, &s) in speakers.iter().enumerate() {
            if s >= m {
                return Err(LabError::invalid(format!("speaker {s} out of range")));
            }
            onehot[b * m + s] = T::lit(-1.0 / speakers.len() as f64);
        }
        let w = tape.constant(speakers.len(), m, onehot);
        let picked = tape.mul(lp, w);
        Ok(tape.sum(picked))
    }

    /// Embeddings of whole sequences with frozen parameters.
    pub fn embed_sequences<T: Real>(&self, params: &ParameterStore<T>, seqs: &[&LatentSequence]) -> Result<Vec<Vec<f64>>> {
        let (data, seg) = pack::<T>(seqs);
        let mut tape = Tape::new();
        let p = tape.bind(params, false);
        let x = tape.constant(seg.total(), self.latent_dim, data);
        let e = self.embed(&mut tape, &p, x, &seg)?;
        Ok(tape
            .value(e)
            .chunks(self.cfg.embed_dim)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect())
    }
}

/// `1 - cos(e_real, e_fake)` averaged over rows of two unit-norm embedding
/// matrices. Lies in `[0, 2]`.
pub fn sv_loss<T: Real>(tape: &mut Tape<T>, e_fake: Var, e_real: Var) -> Var {
    let d = tape.row_dot(e_fake, e_real);
    let m = tape.mean(d);
    let neg = tape.scale(m, T::lit(-1.0));
    tape.add_scalar(neg, T::one())
}

/// Equal error rate of a same/different decision by thresholding cosine.
pub fn equal_error_rate(same: &[f64], cross: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = same.iter().chain(cross).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, 1.0);
    for &th in &thresholds {
        let frr = same.iter().filter(|&&s| s < th).count() as f64 / same.len() as f64;
        let far = cross.iter().filter(|&&s| s >= th).count() as f64 / cross.len() as f64;
        let gap = (frr - far).abs();
        if gap < best.0 {
            best = (gap, (frr + far) / 2.0);
        }
    }
    best.1
}
