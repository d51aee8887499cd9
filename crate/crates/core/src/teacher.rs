//! Teacher diffusion training and guided ancestral sampling.

use distill_substrate::{ema_update, try_value_and_grad, Bound, ParameterStore, Real, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::latent::{LatentSequence, PromptMask};
use crate::nets::{drop_conditions, DitBatch, DitNet};
use crate::rng;
use crate::sampling::{self, Observer, SampleRequest, Sampler};
use crate::schedule::ScheduleParams;
use crate::synthtask::{sample_prompt_mask, Dataset};
use crate::train::{optimize, OptimConfig, StepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub optim: OptimConfig,
    pub ema_decay: f64,
    pub ema_every: u64,
    pub guidance: f64,
    pub sampler_steps: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                steps: 20_000,
                batch: 32,
                lr_peak: 1e-4,
                lr_final: 1e-5,
                warmup_frac: 0.01,
                grad_clip: None,
                ..Default::default()
            },
            ema_decay: 0.99,
            ema_every: 100,
            guidance: 2.0,
            sampler_steps: 128,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate("teacher.optim")?;
        let bad = |m: &str| Err(LabError::Config { path: "teacher".into(), message: m.into() });
        if !(0.0..=1.0).contains(&self.ema_decay) || self.ema_every == 0 {
            return bad("ema_decay must lie in [0, 1] and ema_every be positive");
        }
        if !(self.guidance >= 0.0) {
            return bad("guidance must be non-negative");
        }
        if self.sampler_steps == 0 {
            return bad("sampler_steps must be positive");
        }
        Ok(())
    }
}

/// A noised training batch: network inputs, regression targets and the
/// per-element weights of the masked mean.
#[derive(Debug, Clone)]
pub struct DiffusionDraw<T> {
    pub batch: DitBatch,
    pub x_t: Vec<T>,
    pub target: Vec<T>,
    pub weights: Vec<T>,
    /// Elements without any non-prompt frame (excluded from the loss).
    pub skipped: usize,
}

/// Samples `t ~ U(0, 1)` and noise per element, forms `x_t` with the prompt
/// region replaced by clean data, and the velocity targets.
pub fn draw_diffusion<T: Real, R: Rng + ?Sized>(
    x0: &[&LatentSequence],
    masks: &[PromptMask],
    tokens: Vec<Option<Vec<usize>>>,
    schedule: &ScheduleParams,
    r: &mut R,
) -> Result<DiffusionDraw<T>> {
    if x0.len() != masks.len() {
        return Err(LabError::shape(format!("{} latents with {} masks", x0.len(), masks.len())));
    }
    let dim = x0.first().ok_or_else(|| LabError::invalid("empty batch"))?.dim();
    let mut x_t = Vec::new();
    let mut target = Vec::new();
    let mut live = Vec::new();
    let mut ts = Vec::with_capacity(x0.len());
    let mut skipped = 0;
    for (x, m) in x0.iter().zip(masks) {
        if m.len() != x.frames() {
            return Err(LabError::shape(format!("mask over {} frames for a {}-frame latent", m.len(), x.frames())));
        }
        let t: f64 = r.random();
        let ab = schedule.alpha_sigma(t)?;
        ts.push(t);
        if m.prompt_frames() == x.frames() {
            skipped += 1;
            log::warn!("training element has no non-prompt frames; skipped");
        }
        for i in 0..x.frames() {
            for &c in x.frame(i) {
                let e: f64 = r.sample(StandardNormal);
                let prompt = m.is_prompt(i);
                x_t.push(T::lit(if prompt { c } else { ab.diffuse(c, e) }));
                target.push(T::lit(ab.velocity(c, e)));
                live.push(!prompt);
            }
        }
    }
    let n_live = live.iter().filter(|&&l| l).count();
    let w = if n_live > 0 { 1.0 / n_live as f64 } else { 0.0 };
    let weights = live.iter().map(|&l| T::lit(if l { w } else { 0.0 })).collect();
    let lengths: Vec<usize> = x0.iter().map(|x| x.frames()).collect();
    let prompts: Vec<usize> = masks.iter().map(|m| m.prompt_frames()).collect();
    let batch = DitBatch::new(&lengths, &prompts, tokens, ts)?;
    debug_assert_eq!(x_t.len(), batch.total_frames() * dim);
    Ok(DiffusionDraw { batch, x_t, target, weights, skipped })
}

/// Mean squared error over non-prompt elements.
pub fn masked_mse<T: Real>(tape: &mut Tape<T>, pred: Var, draw: &DiffusionDraw<T>) -> Var {
    let (r, c) = tape.shape(pred);
    let target = tape.constant(r, c, draw.target.clone());
    let w = tape.constant(r, c, draw.weights.clone());
    let d = tape.sub(pred, target);
    let sq = tape.square(d);
    let wsq = tape.mul(sq, w);
    tape.sum(wsq)
}

/// Diffusion loss of `net` on a prepared draw.
pub fn diffusion_loss<T: Real>(net: &DitNet, tape: &mut Tape<T>, p: &Bound, draw: &DiffusionDraw<T>) -> Result<Var> {
    let x = tape.constant(draw.batch.total_frames(), net.latent_dim, draw.x_t.clone());
    let out = net.forward(tape, p, &draw.batch, x)?;
    Ok(masked_mse(tape, out.v, draw))
}

/// Draws a training batch from `data` with fresh prompt masks and condition
/// dropout.
pub fn draw_training_batch<T: Real, R: Rng + ?Sized>(
    data: &Dataset,
    batch: usize,
    cond_dropout: f64,
    schedule: &ScheduleParams,
    r: &mut R,
) -> Result<DiffusionDraw<T>> {
    let picks: Vec<usize> = (0..batch).map(|_| r.random_range(0..data.len())).collect();
    let x0: Vec<&LatentSequence> = picks.iter().map(|&i| &data.examples[i].latent).collect();
    let masks = x0.iter().map(|x| sample_prompt_mask(r.random(), x.frames())).collect::<Result<Vec<_>>>()?;
    let mut tokens: Vec<Option<Vec<usize>>> = picks.iter().map(|&i| Some(data.examples[i].tokens.clone())).collect();
    drop_conditions(&mut tokens, cond_dropout, r);
    draw_diffusion(&x0, &masks, tokens, schedule, r)
}

/// Raw and EMA weights of a trained teacher.
pub struct TrainedTeacher<T> {
    pub raw: ParameterStore<T>,
    pub ema: ParameterStore<T>,
    pub log: Vec<StepRecord>,
}

pub fn train_teacher<T: Real>(
    net: &DitNet,
    cfg: &TeacherConfig,
    schedule: &ScheduleParams,
    data: &Dataset,
    seed: u64,
) -> Result<TrainedTeacher<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LabError::invalid("teacher training needs a non-empty dataset"));
    }
    let mut raw = net.init_params::<T>(seed);
    let mut ema = raw.clone();
    let log = optimize(
        &mut raw,
        &cfg.optim,
        "teacher",
        |step, p| {
            let mut r = rng::stream(seed, "teacher-batch", step);
            let draw = draw_training_batch::<T, _>(data, cfg.optim.batch, net.cfg.cond_dropout, schedule, &mut r)?;
            let (loss, g) = try_value_and_grad::<T, LabError, _>(p, |tape, b| diffusion_loss(net, tape, b, &draw))?;
            Ok((loss.as_f64(), g))
        },
        |step, _, p| {
            if (step + 1) % cfg.ema_every == 0 {
                ema_update(&mut ema, p, cfg.ema_decay)?;
            }
            Ok(())
        },
    )?;
    Ok(TrainedTeacher { raw, ema, log })
}

/// Guided velocity `f_c + w (f_c - f_u)` from one batched pass over the
/// conditional and null-conditioned copies. With `w = 0` only the
/// conditional pass runs.
pub fn cfg_velocity<T: Real>(
    net: &DitNet,
    params: &ParameterStore<T>,
    batch: &DitBatch,
    x_t: &[T],
    guidance: f64,
) -> Result<Vec<T>> {
    if !(guidance >= 0.0) {
        return Err(LabError::invalid(format!("guidance {guidance} must be non-negative")));
    }
    if guidance == 0.0 {
        return net.predict(params, batch, x_t);
    }
    let both = batch.concat(&batch.unconditional());
    let mut x2 = x_t.to_vec();
    x2.extend_from_slice(x_t);
    let v = net.predict(params, &both, &x2)?;
    let (fc, fu) = v.split_at(x_t.len());
    let w = T::lit(guidance);
    Ok(fc.iter().zip(fu).map(|(&c, &u)| c + w * (c - u)).collect())
}

/// Uniform teacher grid `t_n = n / N` for `n = N..1`.
pub fn teacher_times(steps: usize) -> Vec<f64> {
    (1..=steps).rev().map(|n| n as f64 / steps as f64).collect()
}

/// Guided ancestral sampler with x0-prediction and fresh-noise re-noising.
/// Returns the latents and the network evaluations spent per sample.
pub fn teacher_sample<T: Real>(
    net: &DitNet,
    params: &ParameterStore<T>,
    requests: &[SampleRequest],
    steps: usize,
    guidance: f64,
    schedule: &ScheduleParams,
    observer: Option<Observer<'_>>,
) -> Result<(Vec<LatentSequence>, u64)> {
    if steps == 0 {
        return Err(LabError::invalid("teacher sampler needs N >= 1"));
    }
    let per_call = if guidance == 0.0 { 1 } else { 2 };
    let mut evals = 0;
    let out = sampling::run(
        requests,
        net.latent_dim,
        &teacher_times(steps),
        schedule,
        |b, x| {
            evals += per_call;
            cfg_velocity(net, params, b, x, guidance)
        },
        observer,
    )?;
    Ok((out, evals))
}

/// Frozen teacher with its sampler settings.
pub struct TeacherSampler<T: Real> {
    pub net: DitNet,
    pub params: ParameterStore<T>,
    pub steps: usize,
    pub guidance: f64,
    pub schedule: ScheduleParams,
}

impl<T: Real> Sampler for TeacherSampler<T> {
    fn label(&self) -> String {
        format!("teacher (N={}, w={})", self.steps, self.guidance)
    }

    fn evals_per_sample(&self) -> u64 {
        if self.guidance == 0.0 {
            self.steps as u64
        } else {
            2 * self.steps as u64
        }
    }

    fn sample(&self, requests: &[SampleRequest]) -> Result<Vec<LatentSequence>> {
        sampling::sample_chunked(requests, |chunk| {
            Ok(teacher_sample(&self.net, &self.params, chunk, self.steps, self.guidance, &self.schedule, None)?.0)
        })
    }
}

