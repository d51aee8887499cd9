//! Shared iterative sampler: at each time re-apply the prompt to `x_t`,
//! predict `v`, recover `x0`, re-apply the prompt to `x0` and, unless this is
//! the last time, re-noise to the next time with fresh Gaussian noise.

use distill_substrate::Real;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::latent::{LatentSequence, PromptMask};
use crate::nets::DitBatch;
use crate::rng;
use crate::schedule::ScheduleParams;

/// One generation job: text, optional clean prompt prefix, target length
/// and a private seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub tokens: Vec<usize>,
    pub prompt: Option<LatentSequence>,
    pub total_frames: usize,
    pub seed: u64,
}

impl SampleRequest {
    pub fn prompt_frames(&self) -> usize {
        self.prompt.as_ref().map_or(0, |p| p.frames())
    }

    pub fn mask(&self) -> Result<PromptMask> {
        PromptMask::new(self.total_frames, self.prompt_frames())
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(LabError::invalid("sample request without text"));
        }
        if let Some(p) = &self.prompt {
            if p.dim() != dim {
                return Err(LabError::shape(format!("prompt width {} vs latent width {dim}", p.dim())));
            }
            if p.frames() > self.total_frames {
                return Err(LabError::shape(format!(
                    "prompt of {} frames longer than the {} requested",
                    p.frames(),
                    self.total_frames
                )));
            }
        }
        if self.total_frames == 0 {
            return Err(LabError::invalid("sample request for zero frames"));
        }
        Ok(())
    }
}

/// State of every request after one sampler step.
pub struct StepTrace<'a> {
    pub index: usize,
    pub t: f64,
    /// Network input after prompt re-application.
    pub x_t: &'a [LatentSequence],
    /// Clean estimate after prompt re-application.
    pub x0: &'a [LatentSequence],
}

pub type Observer<'o> = &'o mut dyn FnMut(&StepTrace<'_>);

/// Overwrites the prompt rows of each packed sequence.
pub(crate) fn apply_prompts<T: Real>(x: &mut [T], requests: &[SampleRequest], dim: usize) {
    let mut off = 0;
    for r in requests {
        if let Some(p) = &r.prompt {
            for (dst, &src) in x[off..off + p.data().len()].iter_mut().zip(p.data()) {
                *dst = T::lit(src);
            }
        }
        off += r.total_frames * dim;
    }
}

/// Runs the sampler over `times` (strictly decreasing). `predict(batch, x_t)`
/// returns `v` for the packed batch. Returns the final clean latents.
pub fn run<T, P>(
    requests: &[SampleRequest],
    dim: usize,
    times: &[f64],
    schedule: &ScheduleParams,
    mut predict: P,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<LatentSequence>>
where
    T: Real,
    P: FnMut(&DitBatch, &[T]) -> Result<Vec<T>>,
{
    if times.is_empty() {
        return Err(LabError::invalid("sampler needs at least one time"));
    }
    for r in requests {
        r.validate(dim)?;
    }
    let lengths: Vec<usize> = requests.iter().map(|r| r.total_frames).collect();
    let prompts: Vec<usize> = requests.iter().map(|r| r.prompt_frames()).collect();
    let tokens: Vec<Option<Vec<usize>>> = requests.iter().map(|r| Some(r.tokens.clone())).collect();
    let mut rngs: Vec<_> = requests.iter().map(|r| rng::rng_from(r.seed)).collect();
    let mut x: Vec<T> = Vec::with_capacity(lengths.iter().sum::<usize>() * dim);
    for (r, &l) in rngs.iter_mut().zip(&lengths) {
        x.extend((0..l * dim).map(|_| T::lit(r.sample::<f64, _>(StandardNormal))));
    }
    let mut x0 = vec![T::zero(); x.len()];
    for (i, &t) in times.iter().enumerate() {
        apply_prompts(&mut x, requests, dim);
        let batch = DitBatch::new(&lengths, &prompts, tokens.clone(), vec![t; requests.len()])?;
        let v = predict(&batch, &x)?;
        let ab = schedule.alpha_sigma(t)?;
        let (a, s) = (T::lit(ab.alpha), T::lit(ab.sigma));
        for ((o, &xt), &vv) in x0.iter_mut().zip(&x).zip(&v) {
            *o = a * xt - s * vv;
        }
        apply_prompts(&mut x0, requests, dim);
        if let Some(obs) = observer.as_mut() {
            let xs = crate::latent::unpack(&x, &lengths, dim);
            let x0s = crate::latent::unpack(&x0, &lengths, dim);
            obs(&StepTrace { index: i, t, x_t: &xs, x0: &x0s });
        }
        if let Some(&next) = times.get(i + 1) {
            let ab = schedule.alpha_sigma(next)?;
            let (a, s) = (T::lit(ab.alpha), T::lit(ab.sigma));
            let mut off = 0;
            for (r, &l) in rngs.iter_mut().zip(&lengths) {
                for j in off..off + l * dim {
                    x[j] = a * x0[j] + s * T::lit(r.sample::<f64, _>(StandardNormal));
                }
                off += l * dim;
            }
        }
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(LabError::invalid("sampler produced non-finite values"));
    }
    Ok(crate::latent::unpack(&x0, &lengths, dim))
}

/// Anything that turns requests into latents with a fixed network-evaluation
/// cost per sample.
pub trait Sampler: Sync {
    fn label(&self) -> String;
    /// Network evaluations spent on one sample.
    fn evals_per_sample(&self) -> u64;
    fn sample(&self, requests: &[SampleRequest]) -> Result<Vec<LatentSequence>>;
}

/// Requests are generated in chunks of this many samples.
pub const SAMPLE_CHUNK: usize = 32;

/// Runs `f` over fixed-size chunks of `requests` in parallel. Chunk
/// boundaries do not depend on the thread count, so neither do the outputs.
pub fn sample_chunked<F>(requests: &[SampleRequest], f: F) -> Result<Vec<LatentSequence>>
where
    F: Fn(&[SampleRequest]) -> Result<Vec<LatentSequence>> + Sync,
{
    use rayon::prelude::*;
    let parts = requests.par_chunks(SAMPLE_CHUNK).map(&f).collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}
