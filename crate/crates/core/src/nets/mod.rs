//! Network architectures: the conditional diffusion transformer shared by the
//! teacher, the student generator and the student score network, and the
//! conditional discriminator that reads the score network's features.

pub(crate) mod blocks;
mod disc;
mod dit;

use std::sync::Arc;

use distill_substrate::Segments;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use disc::Discriminator;
pub use dit::{DitNet, DitOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub cond_dropout: f64,
    pub disc_dim: usize,
    pub disc_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            ff_dim: 192,
            heads: 4,
            enc_layers: 2,
            dec_layers: 4,
            cond_dropout: 0.1,
            disc_dim: 64,
            disc_layers: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config { path: "net".into(), message: m.into() });
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.disc_dim == 0 || !self.disc_dim.is_multiple_of(self.heads) {
            return bad("disc_dim must be a positive multiple of heads");
        }
        if !self.model_dim.is_multiple_of(2) || !self.disc_dim.is_multiple_of(2) {
            return bad("model_dim and disc_dim must be even");
        }
        if self.ff_dim == 0 || self.dec_layers == 0 {
            return bad("ff_dim and dec_layers must be positive");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Per-sample inputs of one forward pass, packed along the frame axis.
#[derive(Debug, Clone)]
pub struct DitBatch {
    pub frames: Arc<Segments>,
    /// Prompt-mask bit of every packed frame.
    pub mask: Vec<usize>,
    /// Token condition per sample; `None` selects the null condition.
    pub tokens: Vec<Option<Vec<usize>>>,
    pub t: Vec<f64>,
}

impl DitBatch {
    pub fn new(
        lengths: &[usize],
        prompt_frames: &[usize],
        tokens: Vec<Option<Vec<usize>>>,
        t: Vec<f64>,
    ) -> Result<Self> {
        let b = lengths.len();
        if b == 0 {
            return Err(LabError::invalid("empty batch"));
        }
        if prompt_frames.len() != b || tokens.len() != b || t.len() != b {
            return Err(LabError::shape(format!(
                "batch of {b} lengths with {} masks, {} conditions, {} times",
                prompt_frames.len(),
                tokens.len(),
                t.len()
            )));
        }
        let mut mask = Vec::with_capacity(lengths.iter().sum());
        for (&l, &p) in lengths.iter().zip(prompt_frames) {
            if l == 0 {
                return Err(LabError::shape("zero-length sequence in batch"));
            }
            if p > l {
                return Err(LabError::shape(format!("mask of {p} prompt frames exceeds length {l}")));
            }
            mask.extend((0..l).map(|i| usize::from(i < p)));
        }
        if let Some(x) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(LabError::invalid(format!("time {x} outside [0, 1]")));
        }
        if tokens.iter().flatten().any(|s| s.is_empty()) {
            return Err(LabError::invalid("empty token condition; use None for the null condition"));
        }
        Ok(Self { frames: Segments::from_lengths(lengths), mask, tokens, t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.frames.total()
    }

    /// The same batch with every condition replaced by the null condition.
    pub fn unconditional(&self) -> Self {
        Self { tokens: vec![None; self.len()], ..self.clone() }
    }

    /// Concatenation of two batches.
    pub fn concat(&self, other: &Self) -> Self {
        let mut lengths = self.frames.lengths();
        lengths.extend(other.frames.lengths());
        let mut mask = self.mask.clone();
        mask.extend_from_slice(&other.mask);
        let mut tokens = self.tokens.clone();
        tokens.extend(other.tokens.iter().cloned());
        let mut t = self.t.clone();
        t.extend_from_slice(&other.t);
        Self { frames: Segments::from_lengths(&lengths), mask, tokens, t }
    }
}

/// Training-time condition dropout: each condition becomes null with
/// probability `p`.
pub fn drop_conditions<R: Rng + ?Sized>(tokens: &mut [Option<Vec<usize>>], p: f64, rng: &mut R) {
    for c in tokens.iter_mut() {
        if rng.random::<f64>() < p {
            *c = None;
        }
    }
}
