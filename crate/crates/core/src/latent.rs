//! Latent sequences and prompt masks.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// An `L x D` array of real-valued frames, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(LabError::shape(format!("empty latent {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(LabError::shape(format!(
                "latent {frames}x{dim} needs {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        assert!(frames > 0 && dim > 0, "empty latent");
        Self { frames, dim, data: vec![0.0; frames * dim] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(LabError::shape(format!(
                "frame range {start}..{end} out of 0..{}",
                self.frames
            )));
        }
        Self::new(end - start, self.dim, self.data[start * self.dim..end * self.dim].to_vec())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.dim == other.dim
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(LabError::shape(format!(
                "{}x{} vs {}x{}",
                self.frames, self.dim, other.frames, other.dim
            )))
        }
    }

    /// Mean of channel `c` across frames.
    pub fn channel_mean(&self, c: usize) -> f64 {
        (0..self.frames).map(|i| self.data[i * self.dim + c]).sum::<f64>() / self.frames as f64
    }

    /// Mean over frames, one value per channel.
    pub fn frame_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.frames {
            for (acc, v) in m.iter_mut().zip(self.frame(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Contiguous prefix of `prompt` frames within a sequence of `len` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMask {
    len: usize,
    prompt: usize,
}

impl PromptMask {
    pub fn new(len: usize, prompt: usize) -> Result<Self> {
        if len == 0 {
            return Err(LabError::invalid("prompt mask over zero frames"));
        }
        if prompt > len {
            return Err(LabError::invalid(format!("prompt of {prompt} frames exceeds length {len}")));
        }
        Ok(Self { len, prompt })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of masked (prompt) frames.
    pub fn prompt_frames(&self) -> usize {
        self.prompt
    }

    pub fn is_prompt(&self, frame: usize) -> bool {
        frame < self.prompt
    }

    /// The mask as an `L`-vector of 0/1 entries.
    pub fn to_vec(&self) -> Vec<u8> {
        (0..self.len).map(|i| u8::from(i < self.prompt)).collect()
    }

    /// Overwrites the prompt frames of `x` with those of `source`:
    /// `x <- x * (1 - m) + source * m`.
    pub fn apply(&self, x: &mut LatentSequence, source: &LatentSequence) -> Result<()> {
        if x.frames() != self.len || source.frames() < self.prompt || source.dim() != x.dim() {
            return Err(LabError::shape(format!(
                "prompt application: mask over {} frames, target {}x{}, source {}x{}",
                self.len,
                x.frames(),
                x.dim(),
                source.frames(),
                source.dim()
            )));
        }
        let n = self.prompt * x.dim();
        x.data_mut()[..n].copy_from_slice(&source.data()[..n]);
        Ok(())
    }
}

/// Packs sequences row-wise into one buffer of reals plus their segments.
pub fn pack<T: distill_substrate::Real>(seqs: &[&LatentSequence]) -> (Vec<T>, std::sync::Arc<distill_substrate::Segments>) {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.frames()).collect();
    let data = seqs.iter().flat_map(|s| s.data().iter().map(|&v| T::lit(v))).collect();
    (data, distill_substrate::Segments::from_lengths(&lengths))
}

/// Splits packed rows back into sequences of the given lengths.
pub fn unpack<T: distill_substrate::Real>(data: &[T], lengths: &[usize], dim: usize) -> Vec<LatentSequence> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut off = 0;
    for &l in lengths {
        let vals = data[off..off + l * dim].iter().map(|v| v.as_f64()).collect();
        out.push(LatentSequence::new(l, dim, vals).expect("packed lengths"));
        off += l * dim;
    }
    out
}
