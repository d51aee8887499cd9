//! Diversity panels and speed measurement.
//!
//! A conditional group repeats one (text, prompt) pair under different seeds;
//! an unconditional group holds continuations of many different utterances of
//! one speaker. Every request carries a ground-truth rendering of its
//! continuation region so model distributions can be compared with the data.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::metrics::{coefficient_of_variation, log_energy, pitch_proxy, wasserstein_1d};
use super::requests::continuation_request;
use crate::error::{LabError, Result};
use crate::latent::LatentSequence;
use crate::rng;
use crate::sampling::{SampleRequest, Sampler};
use crate::synthtask::SyntheticTask;

/// Scalar features of the generated (non-prompt) region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub pitch: f64,
    pub energy: f64,
}

impl Features {
    pub fn of_continuation(latent: &LatentSequence, prompt_frames: usize) -> Result<Self> {
        let start = prompt_frames.min(latent.frames().saturating_sub(1));
        let region = latent.slice_frames(start, latent.frames())?;
        Ok(Self { pitch: pitch_proxy(&region), energy: log_energy(&region) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub requests: Vec<SampleRequest>,
    pub truth: Vec<Features>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub conditional: Vec<Group>,
    pub unconditional: Vec<Group>,
}

/// Features of one sampler's outputs, grouped like the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelFeatures {
    pub conditional: Vec<Vec<Features>>,
    pub unconditional: Vec<Vec<Features>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelShape {
    pub prompts: usize,
    pub repeats: usize,
    pub speakers: usize,
    pub per_speaker: usize,
    pub prompt_fraction: f64,
}

/// `n` copies of `base` with distinct derived seeds.
pub fn repeat_requests(base: &SampleRequest, n: usize, seed: u64) -> Vec<SampleRequest> {
    (0..n as u64).map(|k| SampleRequest { seed: rng::derive_seed(seed, "repeat", k), ..base.clone() }).collect()
}

/// Population coefficient of variation of the pitch proxy over `n` samples of
/// one (text, prompt) pair.
pub fn conditional_cv(sampler: &dyn Sampler, base: &SampleRequest, n: usize, seed: u64) -> Result<f64> {
    if n < 2 {
        return Err(LabError::invalid("conditional CV needs at least two repeats"));
    }
    let reqs = repeat_requests(base, n, seed);
    let out = sampler.sample(&reqs)?;
    let pitches = out
        .iter()
        .zip(&reqs)
        .map(|(x, r)| Features::of_continuation(x, r.prompt_frames()).map(|f| f.pitch))
        .collect::<Result<Vec<_>>>()?;
    coefficient_of_variation(&pitches)
}

fn truth_for(task: &SyntheticTask, tokens: &[usize], speaker: usize, req: &SampleRequest, seed: u64) -> Result<Features> {
    let rate = task.speaker(speaker)?.rate;
    let p_tok = req.prompt_frames() / rate;
    let rest = task.render_latent(&tokens[p_tok..], speaker, seed)?;
    Features::of_continuation(&rest, 0)
}

/// Builds the diversity panel from the task's dedicated `panel` split.
pub fn build_panel(task: &SyntheticTask, shape: &PanelShape, seed: u64) -> Result<Panel> {
    if shape.repeats < 2 || shape.prompts == 0 {
        return Err(LabError::invalid("panel needs at least one prompt and two repeats"));
    }
    let mut conditional = Vec::with_capacity(shape.prompts);
    let mut idx = 0u64;
    while conditional.len() < shape.prompts {
        let ex = task.example("panel", idx)?;
        idx += 1;
        if ex.tokens.len() < 2 {
            continue;
        }
        let g = conditional.len() as u64;
        let base = continuation_request(task, &ex, shape.prompt_fraction, 0)?;
        let requests = repeat_requests(&base, shape.repeats, rng::derive_seed(seed, "panel-cond", g));
        let truth = (0..shape.repeats as u64)
            .map(|k| truth_for(task, &ex.tokens, ex.speaker, &base, rng::derive_seed(seed, &format!("truth-cond-{g}"), k)))
            .collect::<Result<_>>()?;
        conditional.push(Group { requests, truth });
    }

    let speakers = shape.speakers.min(task.config().num_speakers);
    let mut unconditional: Vec<Group> = (0..speakers).map(|_| Group { requests: vec![], truth: vec![] }).collect();
    let mut idx = 0u64;
    let limit = 1_000_000u64;
    while unconditional.iter().any(|g| g.requests.len() < shape.per_speaker) {
        if idx >= limit {
            return Err(LabError::invalid("could not fill the unconditional panel"));
        }
        let ex = task.example("panel-uncond", idx)?;
        idx += 1;
        if ex.speaker >= speakers || ex.tokens.len() < 2 || unconditional[ex.speaker].requests.len() >= shape.per_speaker {
            continue;
        }
        let s = rng::derive_seed(seed, "panel-uncond", idx);
        let req = continuation_request(task, &ex, shape.prompt_fraction, s)?;
        let t = truth_for(task, &ex.tokens, ex.speaker, &req, rng::derive_seed(seed, "truth-uncond", idx))?;
        let g = &mut unconditional[ex.speaker];
        g.requests.push(req);
        g.truth.push(t);
    }
    Ok(Panel { conditional, unconditional })
}

impl Panel {
    fn all_requests(&self) -> Vec<SampleRequest> {
        self.conditional.iter().chain(&self.unconditional).flat_map(|g| g.requests.iter().cloned()).collect()
    }

    pub fn truth(&self) -> PanelFeatures {
        PanelFeatures {
            conditional: self.conditional.iter().map(|g| g.truth.clone()).collect(),
            unconditional: self.unconditional.iter().map(|g| g.truth.clone()).collect(),
        }
    }

    /// Samples every panel request once and extracts continuation features.
    pub fn features(&self, sampler: &dyn Sampler) -> Result<PanelFeatures> {
        let reqs = self.all_requests();
        let out = sampler.sample(&reqs)?;
        let mut feats = out
            .iter()
            .zip(&reqs)
            .map(|(x, r)| Features::of_continuation(x, r.prompt_frames()))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut take = |groups: &[Group]| -> Vec<Vec<Features>> {
            groups.iter().map(|g| feats.by_ref().take(g.requests.len()).collect()).collect()
        };
        let conditional = take(&self.conditional);
        let unconditional = take(&self.unconditional);
        Ok(PanelFeatures { conditional, unconditional })
    }
}

fn column(g: &[Features], aspect: Aspect) -> Vec<f64> {
    g.iter().map(|f| if aspect == Aspect::Pitch { f.pitch } else { f.energy }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aspect {
    Pitch,
    Energy,
}

impl Aspect {
    pub fn name(self) -> &'static str {
        match self {
            Aspect::Pitch => "pitch",
            Aspect::Energy => "energy",
        }
    }
}

impl PanelFeatures {
    /// Mean over conditional groups of the per-group pitch CV.
    pub fn conditional_cv(&self) -> Result<f64> {
        let cvs = self
            .conditional
            .iter()
            .map(|g| coefficient_of_variation(&column(g, Aspect::Pitch)))
            .collect::<Result<Vec<_>>>()?;
        Ok(cvs.iter().sum::<f64>() / cvs.len() as f64)
    }

    /// Group-averaged 1-Wasserstein distances to `other` for the conditional
    /// and unconditional pairings.
    pub fn wasserstein(&self, other: &PanelFeatures, aspect: Aspect) -> Result<(f64, f64)> {
        let mean_w = |a: &[Vec<Features>], b: &[Vec<Features>]| -> Result<f64> {
            if a.len() != b.len() || a.is_empty() {
                return Err(LabError::shape("panels of different layout"));
            }
            let mut total = 0.0;
            for (x, y) in a.iter().zip(b) {
                total += wasserstein_1d(&column(x, aspect), &column(y, aspect))?;
            }
            Ok(total / a.len() as f64)
        };
        Ok((mean_w(&self.conditional, &other.conditional)?, mean_w(&self.unconditional, &other.unconditional)?))
    }
}

/// Wall-clock and evaluation-count speed comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub teacher: String,
    pub student: String,
    pub reps: usize,
    pub samples: usize,
    pub teacher_seconds: f64,
    pub student_seconds: f64,
    pub wall_clock_ratio: f64,
    pub eval_count_ratio: f64,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

fn time_reps(s: &dyn Sampler, reqs: &[SampleRequest], reps: usize) -> Result<Duration> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(s.sample(reqs)?);
        times.push(t0.elapsed());
    }
    Ok(median(times))
}

/// Median wall-clock of `teacher` over `student` on the same requests. Both
/// samplers should share network size and batch for the ratio to mean
/// anything.
pub fn rtf_ratio(teacher: &dyn Sampler, student: &dyn Sampler, requests: &[SampleRequest], reps: usize) -> Result<RtfReport> {
    if reps == 0 || requests.is_empty() {
        return Err(LabError::invalid("speed measurement needs requests and at least one repetition"));
    }
    let tt = time_reps(teacher, requests, reps)?;
    let ts = time_reps(student, requests, reps)?;
    if tt.is_zero() || ts.is_zero() {
        return Err(LabError::invalid("timing below clock resolution; increase repetitions or batch"));
    }
    Ok(RtfReport {
        teacher: teacher.label(),
        student: student.label(),
        reps,
        samples: requests.len(),
        teacher_seconds: tt.as_secs_f64(),
        student_seconds: ts.as_secs_f64(),
        wall_clock_ratio: tt.as_secs_f64() / ts.as_secs_f64(),
        eval_count_ratio: teacher.evals_per_sample() as f64 / student.evals_per_sample() as f64,
    })
}
