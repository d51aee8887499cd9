//! Synthetic conditional "latent speech".
//!
//! Each token `k` owns a pattern vector `P_k`; each speaker owns an offset
//! vector, a speaking rate (frames per token) and a pitch base written into
//! channel 0. Rendering emits `rate` frames per token equal to
//! `P_k + offset + pitch_base * e0 + eta * noise`. Because the generative
//! process is known, transcription and speaker identity have analytic oracles.

use std::path::{Path, PathBuf};

use distill_substrate::Archive;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::latent::{LatentSequence, PromptMask};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub num_speakers: usize,
    /// Inclusive range of frames per token.
    pub rate_range: (usize, usize),
    pub frame_noise_std: f64,
    pub master_seed: u64,
    /// Inclusive range of tokens per utterance.
    pub tokens_range: (usize, usize),
    /// Inclusive range of the per-speaker pitch base.
    pub pitch_range: (f64, f64),
    /// Standard deviation of speaker offsets (channels 1..D).
    pub offset_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            latent_dim: 8,
            num_speakers: 16,
            rate_range: (2, 6),
            frame_noise_std: 0.1,
            master_seed: 0,
            tokens_range: (4, 8),
            pitch_range: (2.0, 4.0),
            offset_std: 1.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config { path: "task".into(), message: m });
        if self.vocab_size < 2 || self.latent_dim < 2 || self.num_speakers < 2 {
            return bad("vocab_size, latent_dim and num_speakers must be >= 2".into());
        }
        let (lo, hi) = self.rate_range;
        if lo < 1 || hi < lo {
            return bad(format!("rate_range {lo}..={hi} invalid"));
        }
        let (lo, hi) = self.tokens_range;
        if lo < 1 || hi < lo {
            return bad(format!("tokens_range {lo}..={hi} invalid"));
        }
        if !(self.frame_noise_std >= 0.0 && self.offset_std >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        if !(self.pitch_range.0 <= self.pitch_range.1) {
            return bad("pitch_range must be ordered".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub offset: Vec<f64>,
    pub rate: usize,
    pub pitch_base: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub latent: LatentSequence,
    pub prompt_mask: PromptMask,
}

impl Example {
    /// The clean prompt frames.
    pub fn prompt_latent(&self) -> Option<LatentSequence> {
        let p = self.prompt_mask.prompt_frames();
        (p > 0).then(|| self.latent.slice_frames(0, p).expect("prompt within latent"))
    }
}

/// Patterns and speakers fixed by a [`TaskConfig`].
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    cfg: TaskConfig,
    patterns: Vec<Vec<f64>>,
    speakers: Vec<SpeakerSpec>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl SyntheticTask {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let (k, d) = (cfg.vocab_size, cfg.latent_dim);
        let mut r = rng::stream(cfg.master_seed, "patterns", 0);
        let mut patterns: Vec<Vec<f64>> = (0..k).map(|_| rng::gaussian_vec(&mut r, d)).collect();
        let mut min_d = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                min_d = min_d.min(sq_dist(&patterns[i], &patterns[j]).sqrt());
            }
        }
        let required = 2.0 * cfg.frame_noise_std * (d as f64).sqrt();
        if min_d < required {
            let s = required / min_d.max(1e-12);
            patterns.iter_mut().flatten().for_each(|v| *v *= s);
        }
        let speakers = (0..cfg.num_speakers)
            .map(|m| {
                let mut r = rng::stream(cfg.master_seed, "speaker", m as u64);
                let mut offset: Vec<f64> =
                    rng::gaussian_vec(&mut r, d).into_iter().map(|v| v * cfg.offset_std).collect();
                offset[0] = 0.0;
                let rate = r.random_range(cfg.rate_range.0..=cfg.rate_range.1);
                let pitch_base = cfg.pitch_range.0 + (cfg.pitch_range.1 - cfg.pitch_range.0) * r.random::<f64>();
                SpeakerSpec { offset, rate, pitch_base }
            })
            .collect();
        Ok(Self { cfg, patterns, speakers })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn patterns(&self) -> &[Vec<f64>] {
        &self.patterns
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerSpec> {
        self.speakers
            .get(id)
            .ok_or_else(|| LabError::invalid(format!("speaker {id} out of range")))
    }

    pub fn speakers(&self) -> &[SpeakerSpec] {
        &self.speakers
    }

    pub fn render_latent(&self, tokens: &[usize], speaker: usize, seed: u64) -> Result<LatentSequence> {
        if tokens.is_empty() {
            return Err(LabError::invalid("cannot render an empty token sequence"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(LabError::invalid(format!("token {t} outside vocabulary")));
        }
        let spk = self.speaker(speaker)?;
        let d = self.cfg.latent_dim;
        let mut r = rng::rng_from(seed);
        let mut data = Vec::with_capacity(tokens.len() * spk.rate * d);
        for &t in tokens {
            for _ in 0..spk.rate {
                let noise = rng::gaussian_vec(&mut r, d);
                for c in 0..d {
                    let pitch = if c == 0 { spk.pitch_base } else { 0.0 };
                    data.push(self.patterns[t][c] + spk.offset[c] + pitch + self.cfg.frame_noise_std * noise[c]);
                }
            }
        }
        LatentSequence::new(tokens.len() * spk.rate, d, data)
    }

    /// Random utterance text without immediate repeats.
    pub fn sample_tokens<R: Rng + ?Sized>(&self, r: &mut R) -> Vec<usize> {
        let n = r.random_range(self.cfg.tokens_range.0..=self.cfg.tokens_range.1);
        let mut out: Vec<usize> = Vec::with_capacity(n);
        let all: Vec<usize> = (0..self.cfg.vocab_size).collect();
        for _ in 0..n {
            let choices: Vec<usize> = all.iter().copied().filter(|&k| out.last() != Some(&k)).collect();
            out.push(*choices.choose(r).expect("vocabulary has at least two tokens"));
        }
        out
    }

    /// Example `index` of a named split; a pure function of the master seed.
    pub fn example(&self, split: &str, index: u64) -> Result<Example> {
        let seed = rng::derive_seed(self.cfg.master_seed, split, index);
        let mut r = rng::rng_from(seed);
        let tokens = self.sample_tokens(&mut r);
        let speaker = r.random_range(0..self.cfg.num_speakers);
        let latent = self.render_latent(&tokens, speaker, r.random())?;
        let prompt_mask = sample_prompt_mask(r.random(), latent.frames())?;
        Ok(Example { tokens, speaker, latent, prompt_mask })
    }

    pub fn dataset(&self, split: &str, n: usize) -> Result<Dataset> {
        let examples = (0..n as u64).map(|i| self.example(split, i)).collect::<Result<_>>()?;
        Ok(Dataset { split: split.into(), task: self.cfg.clone(), examples })
    }

    /// Nearest-pattern transcription with a jointly estimated speaker offset.
    pub fn oracle_transcribe(&self, latent: &LatentSequence) -> Vec<usize> {
        let (k, d, l) = (self.cfg.vocab_size, self.cfg.latent_dim, latent.frames());
        assert_eq!(latent.dim(), d, "latent width differs from task");
        let nearest = |frame: &[f64], off: &[f64]| -> (usize, f64) {
            let mut best = (0, f64::INFINITY);
            for (j, p) in self.patterns.iter().enumerate() {
                let dist: f64 = (0..d).map(|c| (frame[c] - off[c] - p[c]).powi(2)).sum();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best
        };
        let mut best: Option<(f64, Vec<usize>)> = None;
        // Each hypothesis for the first frame's token fixes an initial offset,
        // refined by alternating assignment and mean-residual estimation.
        for k0 in 0..k {
            let mut off: Vec<f64> = (0..d).map(|c| latent.frame(0)[c] - self.patterns[k0][c]).collect();
            let mut assign = vec![usize::MAX; l];
            let mut cost = 0.0;
            for _ in 0..20 {
                let next: Vec<(usize, f64)> = (0..l).map(|i| nearest(latent.frame(i), &off)).collect();
                cost = next.iter().map(|x| x.1).sum();
                let labels: Vec<usize> = next.iter().map(|x| x.0).collect();
                if labels == assign {
                    break;
                }
                assign = labels;
                off = vec![0.0; d];
                for i in 0..l {
                    for c in 0..d {
                        off[c] += (latent.frame(i)[c] - self.patterns[assign[i]][c]) / l as f64;
                    }
                }
            }
            if best.as_ref().is_none_or(|b| cost < b.0) {
                best = Some((cost, assign));
            }
        }
        collapse_runs(&best.expect("vocabulary non-empty").1)
    }
}

/// Run-length collapse: runs shorter than half the median run length are
/// dropped, then adjacent equal runs merge into one token.
pub fn collapse_runs(labels: &[usize]) -> Vec<usize> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &x in labels {
        match runs.last_mut() {
            Some((v, n)) if *v == x => *n += 1,
            _ => runs.push((x, 1)),
        }
    }
    if runs.is_empty() {
        return Vec::new();
    }
    let mut lens: Vec<usize> = runs.iter().map(|r| r.1).collect();
    lens.sort_unstable();
    let rate = lens[lens.len() / 2] as f64;
    let mut kept: Vec<(usize, usize)> = runs.iter().copied().filter(|r| r.1 as f64 >= rate / 2.0).collect();
    if kept.is_empty() {
        kept.push(*runs.iter().max_by_key(|r| r.1).unwrap());
    }
    let mut out: Vec<usize> = Vec::with_capacity(kept.len());
    for (v, _) in kept {
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}

/// Unit-normalized frame mean.
pub fn oracle_speaker_embed(latent: &LatentSequence) -> Result<Vec<f64>> {
    let m = latent.frame_mean();
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(LabError::invalid("zero-norm latent has no speaker embedding"));
    }
    Ok(m.into_iter().map(|v| v / n).collect())
}

/// Target length from the prompt's speaking rate.
pub fn estimate_length(tokens: &[usize], prompt_tokens: usize, prompt_frames: usize) -> Result<usize> {
    if tokens.is_empty() {
        return Err(LabError::invalid("cannot estimate the length of an empty text"));
    }
    if prompt_tokens == 0 {
        return Err(LabError::invalid("prompt has no tokens"));
    }
    let l = (tokens.len() as f64 * prompt_frames as f64 / prompt_tokens as f64).round() as usize;
    Ok(l.max(1))
}

/// Prompt covering the first `floor(u * L)` frames, `u ~ U(0, 0.5)`.
pub fn sample_prompt_mask(seed: u64, len: usize) -> Result<PromptMask> {
    let u: f64 = rng::rng_from(seed).random_range(0.0..0.5);
    mask_from_fraction(u, len)
}

pub fn mask_from_fraction(u: f64, len: usize) -> Result<PromptMask> {
    if !(0.0..=1.0).contains(&u) {
        return Err(LabError::invalid(format!("prompt fraction {u} outside [0, 1]")));
    }
    PromptMask::new(len, (u * len as f64).floor() as usize)
}

/// A named split of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub task: TaskConfig,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Writes `<stem>.json` + `<stem>.bin`; returns the manifest path.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let mut a = Archive::new();
        a.set_metadata("kind", "dataset".into());
        a.set_metadata("split", self.split.clone().into());
        a.set_metadata("count", self.examples.len().into());
        a.set_metadata("task", serde_json::to_value(&self.task)?);
        for (i, ex) in self.examples.iter().enumerate() {
            let toks: Vec<i64> = ex.tokens.iter().map(|&t| t as i64).collect();
            a.add_i64(&format!("{i:06}/tokens"), &[toks.len()], &toks)?;
            let meta = [ex.speaker as i64, ex.prompt_mask.prompt_frames() as i64];
            a.add_i64(&format!("{i:06}/meta"), &[2], &meta)?;
            a.add_real(&format!("{i:06}/latent"), &[ex.latent.frames(), ex.latent.dim()], ex.latent.data())?;
        }
        Ok(a.save(stem)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let field = |k: &str| {
            a.metadata(k)
                .cloned()
                .ok_or_else(|| LabError::invalid(format!("{} lacks `{k}` metadata", path.display())))
        };
        let split = field("split")?.as_str().unwrap_or_default().to_string();
        let count = field("count")?.as_u64().unwrap_or(0) as usize;
        let task: TaskConfig = serde_json::from_value(field("task")?)?;
        let mut examples = Vec::with_capacity(count);
        for i in 0..count {
            let (_, toks) = a.i64s(&format!("{i:06}/tokens"))?;
            let (_, meta) = a.i64s(&format!("{i:06}/meta"))?;
            let (shape, data) = a.real::<f64>(&format!("{i:06}/latent"))?;
            let latent = LatentSequence::new(shape[0], shape[1], data)?;
            let prompt_mask = PromptMask::new(latent.frames(), meta[1] as usize)?;
            examples.push(Example {
                tokens: toks.into_iter().map(|t| t as usize).collect(),
                speaker: meta[0] as usize,
                latent,
                prompt_mask,
            });
        }
        Ok(Self { split, task, examples })
    }
}
