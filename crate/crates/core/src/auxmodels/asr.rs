//! Latent recognizer: a small transformer emitting per-frame logits over the
//! blank plus `K` token symbols (token `k` is symbol `k + 1`).

use std::sync::Arc;

use distill_substrate::{Bound, ParameterStore, Real, Segments, Tape, Var};
use serde::{Deserialize, Serialize};

use super::ctc;
use crate::error::{LabError, Result};
use crate::latent::{pack, LatentSequence};
use crate::nets::blocks::{self, Init};
use crate::rng;
use crate::train::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Extra Gaussian noise added to training inputs.
    pub noise_aug: f64,
    pub optim: OptimConfig,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            ff_dim: 64,
            heads: 2,
            layers: 2,
            noise_aug: 0.05,
            optim: OptimConfig { steps: 1500, batch: 32, lr_peak: 3e-3, lr_final: 1e-4, ..Default::default() },
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(2) {
            return Err(LabError::Config { path: "asr.dim".into(), message: "dim must be an even multiple of heads".into() });
        }
        self.optim.validate("asr.optim")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentAsr {
    pub cfg: AsrConfig,
    pub vocab: usize,
    pub latent_dim: usize,
}

/// Token ids to CTC symbols.
pub fn to_symbols(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().map(|t| t + 1).collect()
}

impl LatentAsr {
    pub fn new(cfg: AsrConfig, vocab: usize, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, vocab, latent_dim })
    }

    pub fn symbols(&self) -> usize {
        self.vocab + 1
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let d = self.cfg.dim;
        let mut init = Init::new(rng::stream(seed, "asr-init", 0));
        init.linear("in_proj", self.latent_dim, d);
        for i in 0..self.cfg.layers {
            blocks::init_encoder_layer(&mut init, &format!("layer.{i}"), d, self.cfg.ff_dim);
        }
        init.layer_norm("ln_f", d);
        init.linear("head", d, self.symbols());
        init.finish()
    }

    /// Per-frame logits (`frames x (K + 1)`).
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, seg: &Arc<Segments>) -> Var {
        let d = self.cfg.dim;
        let h = blocks::linear(tape, p, "in_proj", x);
        let pos = tape.constant(seg.total(), d, blocks::sinusoids(&blocks::relative_positions(seg), d, blocks::POS_BASE));
        let mut h = tape.add(h, pos);
        for i in 0..self.cfg.layers {
            h = blocks::encoder_layer(tape, p, &format!("layer.{i}"), h, seg, self.cfg.heads);
        }
        let h = blocks::layer_norm(tape, p, "ln_f", h);
        blocks::linear(tape, p, "head", h)
    }

    /// Mean per-sequence CTC loss against token targets.
    pub fn ctc_batch_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        seg: &Arc<Segments>,
        targets: &[Vec<usize>],
    ) -> Result<Var> {
        if targets.len() != seg.len() {
            return Err(LabError::shape(format!("{} targets for {} sequences", targets.len(), seg.len())));
        }
        let logits = self.logits(tape, p, x, seg);
        let mut terms = Vec::with_capacity(targets.len());
        for (b, target) in targets.iter().enumerate() {
            let rows: Vec<usize> = seg.range(b).collect();
            let lb = tape.gather_rows(logits, &rows);
            terms.push(ctc::ctc_node(tape, lb, &to_symbols(target))?);
        }
        let all = tape.concat_rows(&terms);
        Ok(tape.mean(all))
    }

    /// Greedy transcription of each sequence, as token ids.
    pub fn transcribe<T: Real>(&self, params: &ParameterStore<T>, seqs: &[&LatentSequence]) -> Vec<Vec<usize>> {
        let (data, seg) = pack::<T>(seqs);
        let mut tape = Tape::new();
        let p = tape.bind(params, false);
        let x = tape.constant(seg.total(), self.latent_dim, data);
        let logits = self.logits(&mut tape, &p, x, &seg);
        let v = self.symbols();
        let values = tape.value(logits);
        (0..seg.len())
            .map(|b| {
                let r = seg.range(b);
                ctc::ctc_greedy_decode(&values[r.start * v..r.end * v], v)
                    .into_iter()
                    .map(|s| s - 1)
                    .collect()
            })
            .collect()
    }
}
