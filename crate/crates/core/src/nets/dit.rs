//! Conditional diffusion transformer.
//!
//! A token encoder produces the condition `c` (or the learned null row);
//! frame-wise decoder layers combine self-attention, cross-attention to `c`
//! and a gated feed-forward, each preceded by layer normalization whose
//! shift and scale are predicted from the diffusion time.

use distill_substrate::{Bound, ParameterStore, Real, Segments, Tape, Var};

use super::blocks::{self, Init};
use super::{DitBatch, NetConfig};
use crate::error::{LabError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DitNet {
    pub cfg: NetConfig,
    pub vocab: usize,
    pub latent_dim: usize,
}

/// Velocity prediction plus the output of every decoder layer.
pub struct DitOutput {
    pub v: Var,
    pub features: Vec<Var>,
}

impl DitNet {
    pub fn new(cfg: NetConfig, vocab: usize, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab == 0 || latent_dim == 0 {
            return Err(LabError::invalid("vocabulary and latent width must be positive"));
        }
        Ok(Self { cfg, vocab, latent_dim })
    }

    /// Width of the stacked decoder features per frame.
    pub fn feature_dim(&self) -> usize {
        self.cfg.dec_layers * self.cfg.model_dim
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let (d, f) = (self.cfg.model_dim, self.cfg.ff_dim);
        let mut init = Init::new(rng::stream(seed, "dit-init", 0));
        init.embedding("tok_emb", self.vocab, d);
        init.embedding("null_cond", 1, d);
        for i in 0..self.cfg.enc_layers {
            blocks::init_encoder_layer(&mut init, &format!("enc.{i}"), d, f);
        }
        init.layer_norm("enc.ln_f", d);
        init.linear("in_proj", self.latent_dim, d);
        init.embedding("mask_emb", 2, d);
        init.linear("time.l1", d, d);
        init.linear("time.l2", d, d);
        for i in 0..self.cfg.dec_layers {
            init.zeros(&format!("dec.{i}.mod.w"), d, 6 * d);
            init.zeros(&format!("dec.{i}.mod.b"), 1, 6 * d);
            init.attention(&format!("dec.{i}.sa"), d);
            init.attention(&format!("dec.{i}.ca"), d);
            init.feed_forward(&format!("dec.{i}.ff"), d, f);
        }
        init.zeros("final.mod.w", d, 2 * d);
        init.zeros("final.mod.b", 1, 2 * d);
        init.linear("out", d, self.latent_dim);
        init.finish()
    }

    /// Encodes the token conditions; returns the condition rows and their
    /// per-sample segments. Null conditions are a single learned row.
    fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, batch: &DitBatch) -> (Var, std::sync::Arc<Segments>) {
        let d = self.cfg.model_dim;
        let cond: Vec<&Vec<usize>> = batch.tokens.iter().flatten().collect();
        let lengths: Vec<usize> = batch.tokens.iter().map(|t| t.as_ref().map_or(1, |t| t.len())).collect();
        let cseg = Segments::from_lengths(&lengths);
        let null = p.get("null_cond");
        if cond.is_empty() {
            let c = tape.gather_rows(null, &vec![0; batch.len()]);
            return (c, cseg);
        }
        let ids: Vec<usize> = cond.iter().flat_map(|t| t.iter().copied()).collect();
        let tseg = Segments::from_lengths(&cond.iter().map(|t| t.len()).collect::<Vec<_>>());
        let emb = tape.embedding(p.get("tok_emb"), &ids);
        let pos = tape.constant(ids.len(), d, blocks::sinusoids(&blocks::relative_positions(&tseg), d, blocks::POS_BASE));
        let mut x = tape.add(emb, pos);
        for i in 0..self.cfg.enc_layers {
            x = blocks::encoder_layer(tape, p, &format!("enc.{i}"), x, &tseg, self.cfg.heads);
        }
        let x = blocks::layer_norm(tape, p, "enc.ln_f", x);
        if cond.len() == batch.len() {
            return (x, cseg);
        }
        let null_row = ids.len();
        let rows = tape.concat_rows(&[x, null]);
        let mut idx = Vec::with_capacity(cseg.total());
        let mut next = 0;
        for t in &batch.tokens {
            match t {
                Some(t) => {
                    idx.extend(next..next + t.len());
                    next += t.len();
                }
                None => idx.push(null_row),
            }
        }
        (tape.gather_rows(rows, &idx), cseg)
    }

    /// Time embedding `[B x d]` before the SiLU shared by all modulations.
    fn time_embedding<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, t: &[f64]) -> Var {
        let d = self.cfg.model_dim;
        let pos: Vec<f64> = t.iter().map(|t| t * blocks::TIME_SCALE).collect();
        let s = tape.constant(t.len(), d, blocks::sinusoids(&pos, d, blocks::TIME_BASE));
        let h = blocks::linear(tape, p, "time.l1", s);
        let h = tape.silu(h);
        blocks::linear(tape, p, "time.l2", h)
    }

    /// Predicts `v` for the packed noisy frames `x_t` (`total_frames x D`).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, batch: &DitBatch, x_t: Var) -> Result<DitOutput> {
        let (rows, cols) = tape.shape(x_t);
        if rows != batch.total_frames() || cols != self.latent_dim {
            return Err(LabError::shape(format!(
                "x_t is {rows}x{cols}, batch expects {}x{}",
                batch.total_frames(),
                self.latent_dim
            )));
        }
        if let Some(t) = batch.tokens.iter().flatten().flatten().find(|&&t| t >= self.vocab) {
            return Err(LabError::invalid(format!("token {t} outside vocabulary")));
        }
        let (d, heads) = (self.cfg.model_dim, self.cfg.heads);
        let fseg = &batch.frames;
        let (c, cseg) = self.encode(tape, p, batch);

        let h = blocks::linear(tape, p, "in_proj", x_t);
        let m = tape.embedding(p.get("mask_emb"), &batch.mask);
        let h = tape.add(h, m);
        let pos = tape.constant(rows, d, blocks::sinusoids(&blocks::relative_positions(fseg), d, blocks::POS_BASE));
        let mut h = tape.add(h, pos);

        let temb = self.time_embedding(tape, p, &batch.t);
        let st = tape.silu(temb);
        let mut features = Vec::with_capacity(self.cfg.dec_layers);
        for i in 0..self.cfg.dec_layers {
            let name = format!("dec.{i}");
            let mods = blocks::linear(tape, p, &format!("{name}.mod"), st);
            let chunk = |tape: &mut Tape<T>, j: usize| tape.slice_cols(mods, j * d, (j + 1) * d);

            let (sh, sc) = (chunk(tape, 0), chunk(tape, 1));
            let n = tape.layer_norm(h, blocks::LN_EPS);
            let n = tape.modulate(n, sh, sc, fseg);
            let a = blocks::attention(tape, p, &format!("{name}.sa"), n, n, fseg, fseg, heads);
            h = tape.add(h, a);

            let (sh, sc) = (chunk(tape, 2), chunk(tape, 3));
            let n = tape.layer_norm(h, blocks::LN_EPS);
            let n = tape.modulate(n, sh, sc, fseg);
            let a = blocks::attention(tape, p, &format!("{name}.ca"), n, c, fseg, &cseg, heads);
            h = tape.add(h, a);

            let (sh, sc) = (chunk(tape, 4), chunk(tape, 5));
            let n = tape.layer_norm(h, blocks::LN_EPS);
            let n = tape.modulate(n, sh, sc, fseg);
            let f = blocks::feed_forward(tape, p, &format!("{name}.ff"), n);
            h = tape.add(h, f);
            features.push(h);
        }
        let mods = blocks::linear(tape, p, "final.mod", st);
        let sh = tape.slice_cols(mods, 0, d);
        let sc = tape.slice_cols(mods, d, 2 * d);
        let n = tape.layer_norm(h, blocks::LN_EPS);
        let n = tape.modulate(n, sh, sc, fseg);
        let v = blocks::linear(tape, p, "out", n);
        Ok(DitOutput { v, features })
    }

    /// Frame-wise concatenation of all decoder features.
    pub fn stacked_features<T: Real>(&self, tape: &mut Tape<T>, out: &DitOutput) -> Var {
        tape.concat_cols(&out.features)
    }

    /// Forward pass with frozen parameters, returning `v` values only.
    pub fn predict<T: Real>(&self, params: &ParameterStore<T>, batch: &DitBatch, x_t: &[T]) -> Result<Vec<T>> {
        if x_t.len() != batch.total_frames() * self.latent_dim {
            return Err(LabError::shape(format!(
                "x_t holds {} values, batch expects {}x{}",
                x_t.len(),
                batch.total_frames(),
                self.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let p = tape.bind(params, false);
        let x = tape.constant(batch.total_frames(), self.latent_dim, x_t.to_vec());
        let out = self.forward(&mut tape, &p, batch, x)?;
        if let Some(e) = tape.fault() {
            return Err(e.into());
        }
        Ok(tape.value(out.v).to_vec())
    }
}
