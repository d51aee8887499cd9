//! Conditional discriminator over stacked score-network features.
//!
//! Each frame's features are concatenated with the sample's mean-pooled
//! token embedding, the frame's prompt-mask embedding and the sample's time
//! embedding, projected, passed through a small attention stack and mean
//! pooled to one scalar per sample.

use distill_substrate::{ParameterStore, Real, Tape, Var, Bound};

use super::blocks::{self, Init};
use super::{DitBatch, NetConfig};
use crate::error::{LabError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub cfg: NetConfig,
    pub vocab: usize,
    pub feature_dim: usize,
}

impl Discriminator {
    pub fn new(cfg: NetConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let feature_dim = cfg.dec_layers * cfg.model_dim;
        Ok(Self { cfg, vocab, feature_dim })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let (dd, f) = (self.cfg.disc_dim, self.cfg.ff_dim);
        let mut init = Init::new(rng::stream(seed, "disc-init", 0));
        init.embedding("tok_emb", self.vocab, dd);
        init.embedding("mask_emb", 2, dd);
        init.linear("time", dd, dd);
        init.linear("in_proj", self.feature_dim + 3 * dd, dd);
        for i in 0..self.cfg.disc_layers {
            blocks::init_encoder_layer(&mut init, &format!("layer.{i}"), dd, f);
        }
        init.layer_norm("ln_f", dd);
        init.linear("head", dd, 1);
        init.finish()
    }

    /// One logit per sample (`B x 1`).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var, batch: &DitBatch) -> Result<Var> {
        let (rows, cols) = tape.shape(features);
        if rows != batch.total_frames() || cols != self.feature_dim {
            return Err(LabError::shape(format!(
                "features are {rows}x{cols}, discriminator expects {}x{}",
                batch.total_frames(),
                self.feature_dim
            )));
        }
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(batch.len());
        for t in &batch.tokens {
            let t = t.as_ref().ok_or_else(|| LabError::invalid("discriminator needs a token condition"))?;
            if let Some(x) = t.iter().find(|&&x| x >= self.vocab) {
                return Err(LabError::invalid(format!("token {x} outside vocabulary")));
            }
            ids.extend_from_slice(t);
            lengths.push(t.len());
        }
        let dd = self.cfg.disc_dim;
        let fseg = &batch.frames;
        let tseg = distill_substrate::Segments::from_lengths(&lengths);
        let tok = tape.embedding(p.get("tok_emb"), &ids);
        let tok = tape.seg_mean(tok, &tseg);
        let tok = tape.seg_expand(tok, fseg);
        let mask = tape.embedding(p.get("mask_emb"), &batch.mask);
        let pos: Vec<f64> = batch.t.iter().map(|t| t * blocks::TIME_SCALE).collect();
        let ts = tape.constant(batch.len(), dd, blocks::sinusoids(&pos, dd, blocks::TIME_BASE));
        let te = blocks::linear(tape, p, "time", ts);
        let te = tape.seg_expand(te, fseg);
        let x = tape.concat_cols(&[features, tok, mask, te]);
        let mut h = blocks::linear(tape, p, "in_proj", x);
        for i in 0..self.cfg.disc_layers {
            h = blocks::encoder_layer(tape, p, &format!("layer.{i}"), h, fseg, self.cfg.heads);
        }
        let h = blocks::layer_norm(tape, p, "ln_f", h);
        let pooled = tape.seg_mean(h, fseg);
        Ok(blocks::linear(tape, p, "head", pooled))
    }
}
