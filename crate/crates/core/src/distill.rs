//! Distribution-matching distillation of the teacher into a few-step
//! generator.
//!
//! Each generator update combines the score-difference gradient between the
//! guided teacher and a student score network, an LSGAN term from a
//! discriminator reading the score network's features, and optional CTC and
//! speaker-similarity terms computed by frozen latent metric models. The
//! score network and the discriminator are trained alongside the generator.

use std::path::Path;

use distill_substrate::{adamw_step, Bound, OptimizerState, ParameterStore, Real, Segments, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auxmodels::{sv_loss, LatentAsr, LatentSv};
use crate::error::{LabError, Result};
use crate::latent::{unpack, LatentSequence, PromptMask};
use crate::nets::{DitBatch, DitNet, Discriminator};
use crate::rng;
use crate::sampling::{self, Observer, SampleRequest, Sampler};
use crate::schedule::{ScheduleParams, StudentTimeGrid};
use crate::synthtask::{sample_prompt_mask, Dataset};
use crate::teacher::{cfg_velocity, diffusion_loss, draw_diffusion};
use crate::train::{check_loss, clip_grad_norm, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub grid: StudentTimeGrid,
    /// Generator optimization; the score network and discriminator share
    /// its learning rate.
    pub optim: OptimConfig,
    pub lambda_adv: f64,
    pub lambda_ctc: f64,
    pub lambda_sv: f64,
    pub ctc_warmup_steps: u64,
    pub sv_warmup_steps: u64,
    /// Score-network updates per generator update.
    pub score_updates: usize,
    /// Discriminator updates per generator update.
    pub disc_updates: usize,
    pub dmd_t_range: (f64, f64),
    /// Guidance applied to the teacher's clean estimate.
    pub guidance: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            grid: StudentTimeGrid::default(),
            optim: OptimConfig {
                steps: 4000,
                batch: 32,
                lr_peak: 1e-5,
                lr_final: 1e-5,
                warmup_frac: 0.0,
                grad_clip: None,
                ..Default::default()
            },
            lambda_adv: 1e-3,
            lambda_ctc: 1.0,
            lambda_sv: 1.0,
            ctc_warmup_steps: 500,
            sv_warmup_steps: 1000,
            score_updates: 5,
            disc_updates: 1,
            dmd_t_range: (0.02, 0.98),
            guidance: 2.0,
        }
    }
}

/// Effective weights of the optional generator terms at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub adv: f64,
    pub ctc: f64,
    pub sv: f64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate("distill.optim")?;
        let bad = |m: String| Err(LabError::Config { path: "distill".into(), message: m });
        for (name, v) in [("lambda_adv", self.lambda_adv), ("lambda_ctc", self.lambda_ctc), ("lambda_sv", self.lambda_sv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.score_updates == 0 || self.disc_updates == 0 {
            return bad("update ratios must be at least 1".into());
        }
        let (lo, hi) = self.dmd_t_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("dmd_t_range ({lo}, {hi}) must be an interval inside [0, 1]"));
        }
        if !(self.guidance >= 0.0) {
            return bad("guidance must be non-negative".into());
        }
        Ok(())
    }

    /// Term weights with exact warmup gating.
    pub fn weights_at(&self, step: u64) -> TermWeights {
        TermWeights {
            adv: self.lambda_adv,
            ctc: if step < self.ctc_warmup_steps { 0.0 } else { self.lambda_ctc },
            sv: if step < self.sv_warmup_steps { 0.0 } else { self.lambda_sv },
        }
    }
}

/// Packed clean latents with their prompt masks and texts.
#[derive(Debug, Clone, PartialEq)]
pub struct GenBatch {
    pub lengths: Vec<usize>,
    pub prompts: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    /// Clean frames, `total_frames x dim`; only prompt rows condition the
    /// generator.
    pub clean: Vec<f64>,
    pub dim: usize,
}

impl GenBatch {
    pub fn new(latents: &[&LatentSequence], masks: &[PromptMask], tokens: Vec<Vec<usize>>) -> Result<Self> {
        let dim = latents.first().ok_or_else(|| LabError::invalid("empty batch"))?.dim();
        if masks.len() != latents.len() || tokens.len() != latents.len() {
            return Err(LabError::shape(format!(
                "{} latents with {} masks and {} texts",
                latents.len(),
                masks.len(),
                tokens.len()
            )));
        }
        let mut clean = Vec::new();
        for (x, m) in latents.iter().zip(masks) {
            if x.dim() != dim || m.len() != x.frames() {
                return Err(LabError::shape("batch latents disagree in width or mask length"));
            }
            clean.extend_from_slice(x.data());
        }
        Ok(Self {
            lengths: latents.iter().map(|x| x.frames()).collect(),
            prompts: masks.iter().map(|m| m.prompt_frames()).collect(),
            tokens,
            clean,
            dim,
        })
    }

    /// `n` random examples with fresh prompt masks.
    pub fn draw<R: Rng + ?Sized>(data: &Dataset, n: usize, r: &mut R) -> Result<Self> {
        if data.is_empty() {
            return Err(LabError::invalid("cannot draw from an empty dataset"));
        }
        let picks: Vec<usize> = (0..n).map(|_| r.random_range(0..data.len())).collect();
        let latents: Vec<&LatentSequence> = picks.iter().map(|&i| &data.examples[i].latent).collect();
        let masks = latents.iter().map(|x| sample_prompt_mask(r.random(), x.frames())).collect::<Result<Vec<_>>>()?;
        let tokens = picks.iter().map(|&i| data.examples[i].tokens.clone()).collect();
        Self::new(&latents, &masks, tokens)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.clean.len()
    }

    pub fn segments(&self) -> std::sync::Arc<Segments> {
        Segments::from_lengths(&self.lengths)
    }

    pub fn masks(&self) -> Result<Vec<PromptMask>> {
        self.lengths.iter().zip(&self.prompts).map(|(&l, &p)| PromptMask::new(l, p)).collect()
    }

    /// Network inputs at per-sample times `t`, conditioned on the texts.
    pub fn dit(&self, t: Vec<f64>) -> Result<DitBatch> {
        let tokens = self.tokens.iter().cloned().map(Some).collect();
        DitBatch::new(&self.lengths, &self.prompts, tokens, t)
    }

    fn is_prompt_row(&self) -> Vec<bool> {
        self.lengths.iter().zip(&self.prompts).flat_map(|(&l, &p)| (0..l).map(move |i| i < p)).collect()
    }

    /// 0 on prompt elements, 1 elsewhere.
    fn keep<T: Real>(&self) -> Vec<T> {
        let rows = self.is_prompt_row();
        rows.iter().flat_map(|&p| std::iter::repeat_n(if p { T::zero() } else { T::one() }, self.dim)).collect()
    }

    /// Clean values on prompt elements, 0 elsewhere.
    fn prompt_part<T: Real>(&self) -> Vec<T> {
        let rows = self.is_prompt_row();
        rows.iter()
            .zip(self.clean.chunks(self.dim))
            .flat_map(|(&p, c)| c.iter().map(move |&v| if p { T::lit(v) } else { T::zero() }))
            .collect()
    }

    /// Overwrites prompt rows of `x` with the clean prompt.
    pub fn apply_prompt<T: Real>(&self, x: &mut [T]) {
        for ((row, &p), c) in x.chunks_mut(self.dim).zip(&self.is_prompt_row()).zip(self.clean.chunks(self.dim)) {
            if p {
                for (d, &s) in row.iter_mut().zip(c) {
                    *d = T::lit(s);
                }
            }
        }
    }

    /// Per-element copies of one value per sample.
    pub fn per_element<T: Real>(&self, values: &[f64]) -> Vec<T> {
        self.lengths.iter().zip(values).flat_map(|(&l, &v)| std::iter::repeat_n(T::lit(v), l * self.dim)).collect()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.len());
        let mut o = 0;
        for &l in &self.lengths {
            off.push(o);
            o += l * self.dim;
        }
        off
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let off = self.offsets();
        let mut clean = Vec::new();
        for &i in idx {
            clean.extend_from_slice(&self.clean[off[i]..off[i] + self.lengths[i] * self.dim]);
        }
        Self {
            lengths: idx.iter().map(|&i| self.lengths[i]).collect(),
            prompts: idx.iter().map(|&i| self.prompts[i]).collect(),
            tokens: idx.iter().map(|&i| self.tokens[i].clone()).collect(),
            clean,
            dim: self.dim,
        }
    }

    pub fn latents<T: Real>(&self, x: &[T]) -> Vec<LatentSequence> {
        unpack(x, &self.lengths, self.dim)
    }
}

/// Frozen and trained networks of a distillation run.
pub struct Distiller<'a, T: Real> {
    pub cfg: &'a DistillConfig,
    pub net: &'a DitNet,
    pub disc: &'a Discriminator,
    pub schedule: ScheduleParams,
    /// Teacher weights (the EMA checkpoint).
    pub teacher: &'a ParameterStore<T>,
    pub asr: Option<(&'a LatentAsr, &'a ParameterStore<T>)>,
    pub sv: Option<(&'a LatentSv, &'a ParameterStore<T>)>,
}

/// Generator, score network and discriminator with their optimizers.
#[derive(Debug, Clone)]
pub struct DistillState<T> {
    pub gen: ParameterStore<T>,
    pub score: ParameterStore<T>,
    pub disc: ParameterStore<T>,
    pub gen_opt: OptimizerState<T>,
    pub score_opt: OptimizerState<T>,
    pub disc_opt: OptimizerState<T>,
    /// Completed generator updates.
    pub step: u64,
    /// Completed score-network updates.
    pub score_steps: u64,
}

impl<T: Real> DistillState<T> {
    /// Generator and score network start from the teacher; the
    /// discriminator from a fresh initialization.
    pub fn from_teacher(teacher: &ParameterStore<T>, disc: &Discriminator, seed: u64) -> Self {
        let disc = disc.init_params::<T>(rng::derive_seed(seed, "disc-init", 0));
        Self {
            gen_opt: OptimizerState::new(teacher),
            score_opt: OptimizerState::new(teacher),
            disc_opt: OptimizerState::new(&disc),
            gen: teacher.clone(),
            score: teacher.clone(),
            disc,
            step: 0,
            score_steps: 0,
        }
    }
}

/// Losses and gradient norms of one distillation step. Terms that were not
/// computed (gated or disabled) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub dmd_surrogate: f64,
    pub dmd_delta_rms: f64,
    pub adv_gen: Option<f64>,
    pub adv_disc: f64,
    pub ctc: Option<f64>,
    pub sv: Option<f64>,
    pub score: f64,
    pub gn_dmd: f64,
    pub gn_adv: Option<f64>,
    pub gn_ctc: Option<f64>,
    pub gn_sv: Option<f64>,
    pub gn_total: f64,
}

/// `(x̂0_real - x̂0_fake) / mean|x0 - x̂0_real|` per sample, where the mean
/// runs over all elements of that sample. Samples whose normalizer falls
/// below `1e-12` get a zero update.
pub fn dmd_delta(x0: &[f64], real: &[f64], fake: &[f64], lengths: &[usize], dim: usize) -> Result<Vec<f64>> {
    let n: usize = lengths.iter().sum::<usize>() * dim;
    if x0.len() != n || real.len() != n || fake.len() != n {
        return Err(LabError::shape(format!(
            "dmd inputs of {}, {}, {} values for {n} elements",
            x0.len(),
            real.len(),
            fake.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut off = 0;
    for &l in lengths {
        let r = off..off + l * dim;
        let norm = r.clone().map(|i| (x0[i] - real[i]).abs()).sum::<f64>() / (l * dim) as f64;
        if norm < 1e-12 {
            out.extend(std::iter::repeat_n(0.0, l * dim));
        } else {
            // p_real - p_fake = x̂0_fake - x̂0_real
            out.extend(r.map(|i| ((x0[i] - real[i]) - (x0[i] - fake[i])) / norm));
        }
        off += l * dim;
    }
    Ok(out)
}

fn to_f64<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

fn lits<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::lit(v)).collect()
}

fn uniform_times<R: Rng + ?Sized>(n: usize, (lo, hi): (f64, f64), r: &mut R) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

/// `x_t = α x0 + σ ε` per sample, with clean prompt rows.
fn diffuse_packed<T: Real>(batch: &GenBatch, x0: &[T], t: &[f64], eps: &[f64], schedule: &ScheduleParams) -> Result<Vec<T>> {
    let ab = t.iter().map(|&t| schedule.alpha_sigma(t)).collect::<Result<Vec<_>>>()?;
    let a = batch.per_element::<f64>(&ab.iter().map(|s| s.alpha).collect::<Vec<_>>());
    let s = batch.per_element::<f64>(&ab.iter().map(|s| s.sigma).collect::<Vec<_>>());
    let mut x: Vec<T> = (0..x0.len()).map(|i| T::lit(a[i]) * x0[i] + T::lit(s[i] * eps[i])).collect();
    batch.apply_prompt(&mut x);
    Ok(x)
}

/// `x0 = α x_t - σ v` per sample, with the prompt re-applied.
fn clean_estimate<T: Real>(batch: &GenBatch, x_t: &[T], v: &[T], t: &[f64], schedule: &ScheduleParams) -> Result<Vec<T>> {
    let ab = t.iter().map(|&t| schedule.alpha_sigma(t)).collect::<Result<Vec<_>>>()?;
    let a = batch.per_element::<T>(&ab.iter().map(|s| s.alpha).collect::<Vec<_>>());
    let s = batch.per_element::<T>(&ab.iter().map(|s| s.sigma).collect::<Vec<_>>());
    let mut x0: Vec<T> = (0..x_t.len()).map(|i| a[i] * x_t[i] - s[i] * v[i]).collect();
    batch.apply_prompt(&mut x0);
    Ok(x0)
}

impl<T: Real> Distiller<'_, T> {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.cfg.lambda_ctc > 0.0 && self.asr.is_none() {
            return Err(LabError::Missing {
                what: "latent ASR".into(),
                hint: "train it first or set lambda_ctc to 0".into(),
            });
        }
        if self.cfg.lambda_sv > 0.0 && self.sv.is_none() {
            return Err(LabError::Missing {
                what: "latent speaker model".into(),
                hint: "train it first or set lambda_sv to 0".into(),
            });
        }
        if self.disc.feature_dim != self.net.feature_dim() {
            return Err(LabError::shape("discriminator width does not match generator features"));
        }
        Ok(())
    }

    fn grid_time(&self, n: usize) -> Result<f64> {
        let times = self.cfg.grid.times();
        if n == 0 || n > times.len() {
            return Err(LabError::invalid(format!("grid index {n} outside 1..={}", times.len())));
        }
        Ok(times[n - 1])
    }

    /// Generator input for grid indices `n` (1-based): index 1 diffuses the
    /// data to the first grid time; larger indices run one gradient-free
    /// generator step from the previous grid time and re-noise its clean
    /// estimate with fresh noise. Returns the prompt-applied input and the
    /// per-sample times.
    pub fn simulate_student_input_at<R: Rng + ?Sized>(
        &self,
        gen: &ParameterStore<T>,
        batch: &GenBatch,
        n: &[usize],
        r: &mut R,
    ) -> Result<(Vec<T>, Vec<f64>)> {
        if n.len() != batch.len() {
            return Err(LabError::shape(format!("{} grid indices for {} samples", n.len(), batch.len())));
        }
        let t = n.iter().map(|&k| self.grid_time(k)).collect::<Result<Vec<_>>>()?;
        let clean: Vec<T> = lits(&batch.clean);
        let eps = rng::gaussian_vec(r, batch.numel());
        let mut x = diffuse_packed(batch, &clean, &t, &eps, &self.schedule)?;
        let later: Vec<usize> = (0..batch.len()).filter(|&i| n[i] > 1).collect();
        if !later.is_empty() {
            let sub = batch.subset(&later);
            let t_prev = later.iter().map(|&i| self.grid_time(n[i] - 1)).collect::<Result<Vec<_>>>()?;
            let t_next: Vec<f64> = later.iter().map(|&i| t[i]).collect();
            let eps = rng::gaussian_vec(r, sub.numel());
            let x_prev = diffuse_packed(&sub, &lits::<T>(&sub.clean), &t_prev, &eps, &self.schedule)?;
            let v = self.net.predict(gen, &sub.dit(t_prev.clone())?, &x_prev)?;
            let x0 = clean_estimate(&sub, &x_prev, &v, &t_prev, &self.schedule)?;
            let eps = rng::gaussian_vec(r, sub.numel());
            let x_next = diffuse_packed(&sub, &x0, &t_next, &eps, &self.schedule)?;
            let off = batch.offsets();
            let mut o = 0;
            for &i in &later {
                let len = batch.lengths[i] * batch.dim;
                x[off[i]..off[i] + len].copy_from_slice(&x_next[o..o + len]);
                o += len;
            }
        }
        Ok((x, t))
    }

    /// [`Self::simulate_student_input_at`] with grid indices drawn uniformly.
    pub fn simulate_student_input<R: Rng + ?Sized>(
        &self,
        gen: &ParameterStore<T>,
        batch: &GenBatch,
        r: &mut R,
    ) -> Result<(Vec<T>, Vec<f64>)> {
        let n: Vec<usize> = (0..batch.len()).map(|_| r.random_range(1..=self.cfg.grid.len())).collect();
        self.simulate_student_input_at(gen, batch, &n, r)
    }

    /// Generator clean estimate on the tape, prompt rows replaced by the
    /// clean prompt (constant).
    pub fn generator_x0(
        &self,
        tape: &mut Tape<T>,
        gen: &Bound,
        batch: &GenBatch,
        x_in: &[T],
        t: &[f64],
    ) -> Result<Var> {
        let rows = batch.lengths.iter().sum();
        let dim = batch.dim;
        let x = tape.constant(rows, dim, x_in.to_vec());
        let out = self.net.forward(tape, gen, &batch.dit(t.to_vec())?, x)?;
        let ab = t.iter().map(|&t| self.schedule.alpha_sigma(t)).collect::<Result<Vec<_>>>()?;
        let a = tape.constant(rows, dim, batch.per_element(&ab.iter().map(|s| s.alpha).collect::<Vec<_>>()));
        let s = tape.constant(rows, dim, batch.per_element(&ab.iter().map(|s| s.sigma).collect::<Vec<_>>()));
        let ax = tape.mul(x, a);
        let sv = tape.mul(out.v, s);
        let x0 = tape.sub(ax, sv);
        let keep = tape.constant(rows, dim, batch.keep());
        let prompt = tape.constant(rows, dim, batch.prompt_part());
        let x0 = tape.mul(x0, keep);
        Ok(tape.add(x0, prompt))
    }

    /// Generator clean estimate without a tape.
    pub fn generate(&self, gen: &ParameterStore<T>, batch: &GenBatch, x_in: &[T], t: &[f64]) -> Result<Vec<T>> {
        let v = self.net.predict(gen, &batch.dit(t.to_vec())?, x_in)?;
        clean_estimate(batch, x_in, &v, t, &self.schedule)
    }

    /// DMD update direction for generated clean latents `x0` at times `t`
    /// and noise `eps`: the guided teacher provides the real estimate, the
    /// unguided score network the fake one, both with the prompt re-applied.
    pub fn dmd_generator_grad(
        &self,
        score: &ParameterStore<T>,
        batch: &GenBatch,
        x0: &[T],
        t: &[f64],
        eps: &[f64],
    ) -> Result<Vec<f64>> {
        let (lo, hi) = self.cfg.dmd_t_range;
        if let Some(x) = t.iter().find(|&&x| !(lo..=hi).contains(&x)) {
            return Err(LabError::invalid(format!("DMD time {x} outside [{lo}, {hi}]")));
        }
        let x_t = diffuse_packed(batch, x0, t, eps, &self.schedule)?;
        let dit = batch.dit(t.to_vec())?;
        let v_real = cfg_velocity(self.net, self.teacher, &dit, &x_t, self.cfg.guidance)?;
        let v_fake = self.net.predict(score, &dit, &x_t)?;
        let real = clean_estimate(batch, &x_t, &v_real, t, &self.schedule)?;
        let fake = clean_estimate(batch, &x_t, &v_fake, t, &self.schedule)?;
        dmd_delta(&to_f64(x0), &to_f64(&real), &to_f64(&fake), &batch.lengths, batch.dim)
    }

    /// Score-network features of `x0` diffused to `t` (prompt rows clean).
    /// Gradients reach `x0` but never the score network.
    pub fn noisy_features(
        &self,
        tape: &mut Tape<T>,
        score: &Bound,
        batch: &GenBatch,
        x0: Var,
        t: &[f64],
        eps: &[f64],
    ) -> Result<Var> {
        let (rows, dim) = tape.shape(x0);
        let ab = t.iter().map(|&t| self.schedule.alpha_sigma(t)).collect::<Result<Vec<_>>>()?;
        let a = tape.constant(rows, dim, batch.per_element(&ab.iter().map(|s| s.alpha).collect::<Vec<_>>()));
        let sig = batch.per_element::<f64>(&ab.iter().map(|s| s.sigma).collect::<Vec<_>>());
        let noise = tape.constant(rows, dim, sig.iter().zip(eps).map(|(&s, &e)| T::lit(s * e)).collect());
        let ax = tape.mul(x0, a);
        let x_t = tape.add(ax, noise);
        let keep = tape.constant(rows, dim, batch.keep());
        let prompt = tape.constant(rows, dim, batch.prompt_part());
        let x_t = tape.mul(x_t, keep);
        let x_t = tape.add(x_t, prompt);
        let out = self.net.forward(tape, score, &batch.dit(t.to_vec())?, x_t)?;
        Ok(self.net.stacked_features(tape, &out))
    }

    /// Generator LSGAN loss `mean (D - 1)^2` on noisy fakes. The score
    /// network and discriminator are frozen.
    pub fn gen_adv_loss(
        &self,
        tape: &mut Tape<T>,
        score: &ParameterStore<T>,
        disc: &ParameterStore<T>,
        batch: &GenBatch,
        x0: Var,
        t: &[f64],
        eps: &[f64],
    ) -> Result<Var> {
        let sp = tape.bind(score, false);
        let dp = tape.bind(disc, false);
        let f = self.noisy_features(tape, &sp, batch, x0, t, eps)?;
        let d = self.disc.forward(tape, &dp, f, &batch.dit(t.to_vec())?)?;
        Ok(lsgan_generator(tape, d))
    }

    /// Discriminator LSGAN loss on fakes and reals diffused to the same
    /// times. Only the discriminator bound in `disc` receives gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn disc_loss(
        &self,
        tape: &mut Tape<T>,
        score: &ParameterStore<T>,
        disc: &Bound,
        batch: &GenBatch,
        fake: Var,
        real: Var,
        t: &[f64],
        eps_fake: &[f64],
        eps_real: &[f64],
    ) -> Result<Var> {
        let sp = tape.bind(score, false);
        let fake = tape.stop_gradient(fake);
        let real = tape.stop_gradient(real);
        let ff = self.noisy_features(tape, &sp, batch, fake, t, eps_fake)?;
        let fr = self.noisy_features(tape, &sp, batch, real, t, eps_real)?;
        let ff = tape.stop_gradient(ff);
        let fr = tape.stop_gradient(fr);
        let dit = batch.dit(t.to_vec())?;
        let d_fake = self.disc.forward(tape, disc, ff, &dit)?;
        let d_real = self.disc.forward(tape, disc, fr, &dit)?;
        Ok(lsgan_discriminator(tape, d_fake, d_real))
    }

    /// Mean per-sequence CTC loss of the frozen recognizer on `x0`.
    pub fn ctc_term(&self, tape: &mut Tape<T>, batch: &GenBatch, x0: Var) -> Result<Var> {
        let (model, params) = self.asr.ok_or_else(|| LabError::invalid("CTC term without a recognizer"))?;
        let p = tape.bind(params, false);
        model.ctc_batch_loss(tape, &p, x0, &batch.segments(), &batch.tokens)
    }

    /// Speaker loss between each generated latent and its clean prompt, over
    /// samples with a non-empty prompt. `None` when no sample has one.
    pub fn sv_term(&self, tape: &mut Tape<T>, batch: &GenBatch, x0: Var) -> Result<Option<Var>> {
        let (model, params) = self.sv.ok_or_else(|| LabError::invalid("speaker term without a speaker model"))?;
        let with_prompt: Vec<usize> = (0..batch.len()).filter(|&i| batch.prompts[i] > 0).collect();
        if with_prompt.is_empty() {
            return Ok(None);
        }
        let p = tape.bind(params, false);
        let seg = batch.segments();
        let mut rows = Vec::new();
        let mut prompt_vals = Vec::new();
        for &i in &with_prompt {
            let r = seg.range(i);
            rows.extend(r.clone());
            prompt_vals.extend(
                batch.clean[r.start * batch.dim..(r.start + batch.prompts[i]) * batch.dim].iter().map(|&v| T::lit(v)),
            );
        }
        let fake = tape.gather_rows(x0, &rows);
        let fake_seg = Segments::from_lengths(&with_prompt.iter().map(|&i| batch.lengths[i]).collect::<Vec<_>>());
        let real_lengths: Vec<usize> = with_prompt.iter().map(|&i| batch.prompts[i]).collect();
        let real_seg = Segments::from_lengths(&real_lengths);
        let real = tape.constant(real_seg.total(), batch.dim, prompt_vals);
        let e_fake = model.embed(tape, &p, fake, &fake_seg)?;
        let e_real = model.embed(tape, &p, real, &real_seg)?;
        Ok(Some(sv_loss(tape, e_fake, e_real)))
    }

    /// Diffusion loss of the score network on generated latents `x0`
    /// (values only, so nothing flows back to the generator).
    pub fn score_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        score: &Bound,
        batch: &GenBatch,
        x0: Var,
        r: &mut R,
    ) -> Result<Var> {
        let values = tape.value(x0).to_vec();
        let latents = batch.latents(&values);
        let refs: Vec<&LatentSequence> = latents.iter().collect();
        let tokens = batch.tokens.iter().cloned().map(Some).collect();
        let draw = draw_diffusion::<T, _>(&refs, &batch.masks()?, tokens, &self.schedule, r)?;
        diffusion_loss(self.net, tape, score, &draw)
    }

    /// One score-network update on fresh generator outputs.
    pub fn student_score_update<R: Rng + ?Sized>(
        &self,
        state: &mut DistillState<T>,
        data: &Dataset,
        lr: f64,
        r: &mut R,
    ) -> Result<f64> {
        let batch = GenBatch::draw(data, self.cfg.optim.batch, r)?;
        let (x_in, t) = self.simulate_student_input(&state.gen, &batch, r)?;
        let x0 = self.generate(&state.gen, &batch, &x_in, &t)?;
        let mut tape = Tape::new();
        let sp = tape.bind(&state.score, true);
        let x0v = tape.constant(batch.lengths.iter().sum(), batch.dim, x0);
        let loss = self.score_loss(&mut tape, &sp, &batch, x0v, r)?;
        let grads = tape.backward(loss)?;
        let mut g = sp.collect(&grads);
        let value = tape.scalar(loss).as_f64();
        check_loss(state.step, "score network", value)?;
        clip_grad_norm(&mut g, self.cfg.optim.grad_clip);
        adamw_step(&mut state.score, &g, &mut state.score_opt, lr, &self.cfg.optim.adamw)
            .map_err(|e| LabError::Divergence { step: state.step, detail: format!("score network: {e}") })?;
        state.score_steps += 1;
        Ok(value)
    }

    fn term_grad(&self, tape: &Tape<T>, gen: &Bound, root: Var, what: &str, step: u64) -> Result<ParameterStore<T>> {
        let v = tape.scalar(root).as_f64();
        if !v.is_finite() {
            return Err(LabError::Divergence { step, detail: format!("{what} term is {v}") });
        }
        let grads = tape
            .backward(root)
            .map_err(|e| LabError::Divergence { step, detail: format!("{what} term: {e}") })?;
        let g = gen.collect(&grads);
        for (name, a) in g.iter() {
            if !a.is_finite() {
                return Err(LabError::Divergence { step, detail: format!("{what} term: non-finite gradient for {name}") });
            }
        }
        Ok(g)
    }

    /// One generator update, `disc_updates` discriminator updates and
    /// `score_updates` score-network updates.
    pub fn distill_step(&self, state: &mut DistillState<T>, data: &Dataset, seed: u64) -> Result<StepReport> {
        let step = state.step;
        let cfg = self.cfg;
        let lr = cfg.optim.lr_at(step.min(cfg.optim.steps))?;
        let w = cfg.weights_at(step);
        let mut r = rng::stream(seed, "distill-step", step);

        // generator
        let batch = GenBatch::draw(data, cfg.optim.batch, &mut r)?;
        let (x_in, t_in) = self.simulate_student_input(&state.gen, &batch, &mut r)?;
        let mut tape = Tape::new();
        let gp = tape.bind(&state.gen, true);
        let x0 = self.generator_x0(&mut tape, &gp, &batch, &x_in, &t_in)?;
        let x0_vals = tape.value(x0).to_vec();

        let t_dmd = uniform_times(batch.len(), cfg.dmd_t_range, &mut r);
        let eps = rng::gaussian_vec(&mut r, batch.numel());
        let delta = self.dmd_generator_grad(&state.score, &batch, &x0_vals, &t_dmd, &eps)?;
        let scale = 1.0 / batch.numel() as f64;
        let (rows, dim) = tape.shape(x0);
        let dconst = tape.constant(rows, dim, delta.iter().map(|&d| T::lit(d * scale)).collect());
        let prod = tape.mul(x0, dconst);
        let surrogate = tape.sum(prod);

        let adv = if w.adv > 0.0 {
            let t_adv = uniform_times(batch.len(), cfg.dmd_t_range, &mut r);
            let eps = rng::gaussian_vec(&mut r, batch.numel());
            Some(self.gen_adv_loss(&mut tape, &state.score, &state.disc, &batch, x0, &t_adv, &eps)?)
        } else {
            None
        };
        let ctc = if w.ctc > 0.0 { Some(self.ctc_term(&mut tape, &batch, x0)?) } else { None };
        let sv = if w.sv > 0.0 { self.sv_term(&mut tape, &batch, x0)? } else { None };

        let mut total = self.term_grad(&tape, &gp, surrogate, "dmd", step)?;
        let gn_dmd = total.global_norm();
        let mut extra = |root: Option<Var>, weight: f64, what: &str| -> Result<Option<(f64, f64)>> {
            let Some(root) = root else { return Ok(None) };
            let mut g = self.term_grad(&tape, &gp, root, what, step)?;
            g.scale(T::lit(weight));
            total.add_scaled(&g, T::one())?;
            Ok(Some((tape.scalar(root).as_f64(), g.global_norm())))
        };
        let adv_r = extra(adv, w.adv, "adversarial")?;
        let ctc_r = extra(ctc, w.ctc, "ctc")?;
        let sv_r = extra(sv, w.sv, "speaker")?;
        let gn_total = clip_grad_norm(&mut total, cfg.optim.grad_clip);
        adamw_step(&mut state.gen, &total, &mut state.gen_opt, lr, &cfg.optim.adamw)
            .map_err(|e| LabError::Divergence { step, detail: format!("generator: {e}") })?;

        // discriminator, on this step's generator outputs
        let mut adv_disc = 0.0;
        for _ in 0..cfg.disc_updates {
            let t_d = uniform_times(batch.len(), cfg.dmd_t_range, &mut r);
            let eps_f = rng::gaussian_vec(&mut r, batch.numel());
            let eps_r = rng::gaussian_vec(&mut r, batch.numel());
            let mut tape = Tape::new();
            let dp = tape.bind(&state.disc, true);
            let fake = tape.constant(rows, dim, x0_vals.clone());
            let real = tape.constant(rows, dim, lits(&batch.clean));
            let loss = self.disc_loss(&mut tape, &state.score, &dp, &batch, fake, real, &t_d, &eps_f, &eps_r)?;
            let grads = tape.backward(loss)?;
            let mut g = dp.collect(&grads);
            adv_disc = tape.scalar(loss).as_f64();
            check_loss(step, "discriminator", adv_disc)?;
            clip_grad_norm(&mut g, cfg.optim.grad_clip);
            adamw_step(&mut state.disc, &g, &mut state.disc_opt, lr, &cfg.optim.adamw)
                .map_err(|e| LabError::Divergence { step, detail: format!("discriminator: {e}") })?;
        }

        let mut score = 0.0;
        for _ in 0..cfg.score_updates {
            score += self.student_score_update(state, data, lr, &mut r)?;
        }
        score /= cfg.score_updates as f64;

        let n_live = delta.len().max(1) as f64;
        let report = StepReport {
            step,
            lr,
            dmd_surrogate: tape.scalar(surrogate).as_f64(),
            dmd_delta_rms: (delta.iter().map(|d| d * d).sum::<f64>() / n_live).sqrt(),
            adv_gen: adv_r.map(|x| x.0),
            adv_disc,
            ctc: ctc_r.map(|x| x.0),
            sv: sv_r.map(|x| x.0),
            score,
            gn_dmd,
            gn_adv: adv_r.map(|x| x.1),
            gn_ctc: ctc_r.map(|x| x.1),
            gn_sv: sv_r.map(|x| x.1),
            gn_total,
        };
        state.step += 1;
        if step.is_multiple_of(50) {
            log::debug!(
                "distill step {step}: |Δ| {:.4} adv {:?} ctc {:?} sv {:?} score {:.4}",
                report.dmd_delta_rms,
                report.adv_gen,
                report.ctc,
                report.sv,
                report.score
            );
        }
        Ok(report)
    }

    /// Runs `cfg.optim.steps` distillation steps from the teacher.
    pub fn run(&self, data: &Dataset, seed: u64) -> Result<(DistillState<T>, Vec<StepReport>)> {
        self.validate()?;
        let mut state = DistillState::from_teacher(self.teacher, self.disc, seed);
        let mut log = Vec::with_capacity(self.cfg.optim.steps as usize);
        for _ in 0..self.cfg.optim.steps {
            log.push(self.distill_step(&mut state, data, seed)?);
        }
        Ok((state, log))
    }
}

/// `mean (d - 1)^2`.
pub fn lsgan_generator<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Var {
    let s = tape.add_scalar(d_fake, -T::one());
    let sq = tape.square(s);
    tape.mean(sq)
}

/// `mean d_fake^2 + mean (d_real - 1)^2`.
pub fn lsgan_discriminator<T: Real>(tape: &mut Tape<T>, d_fake: Var, d_real: Var) -> Var {
    let f = tape.square(d_fake);
    let f = tape.mean(f);
    let r = lsgan_generator(tape, d_real);
    tape.add(f, r)
}

/// Few-step sampling over `grid`. Returns the latents and the number of
/// batched generator evaluations.
pub fn multi_step_sample<T: Real>(
    net: &DitNet,
    gen: &ParameterStore<T>,
    requests: &[SampleRequest],
    grid: &StudentTimeGrid,
    schedule: &ScheduleParams,
    observer: Option<Observer<'_>>,
) -> Result<(Vec<LatentSequence>, u64)> {
    let mut evals = 0;
    let out = sampling::run(
        requests,
        net.latent_dim,
        grid.times(),
        schedule,
        |b, x| {
            evals += 1;
            net.predict(gen, b, x)
        },
        observer,
    )?;
    Ok((out, evals))
}

/// Frozen student generator with its time grid.
pub struct StudentSampler<T: Real> {
    pub net: DitNet,
    pub params: ParameterStore<T>,
    pub grid: StudentTimeGrid,
    pub schedule: ScheduleParams,
}

impl<T: Real> Sampler for StudentSampler<T> {
    fn label(&self) -> String {
        format!("student (N={})", self.grid.len())
    }

    fn evals_per_sample(&self) -> u64 {
        self.grid.len() as u64
    }

    fn sample(&self, requests: &[SampleRequest]) -> Result<Vec<LatentSequence>> {
        sampling::sample_chunked(requests, |chunk| {
            Ok(multi_step_sample(&self.net, &self.params, chunk, &self.grid, &self.schedule, None)?.0)
        })
    }
}

/// Writes the per-step distillation log; skipped terms are empty cells.
pub fn write_distill_log(path: &Path, log: &[StepReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "lr",
        "dmd_surrogate",
        "dmd_delta_rms",
        "adv_gen",
        "adv_disc",
        "ctc",
        "sv",
        "score",
        "gn_dmd",
        "gn_adv",
        "gn_ctc",
        "gn_sv",
        "gn_total",
    ])?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for r in log {
        w.write_record(&[
            r.step.to_string(),
            r.lr.to_string(),
            r.dmd_surrogate.to_string(),
            r.dmd_delta_rms.to_string(),
            opt(r.adv_gen),
            r.adv_disc.to_string(),
            opt(r.ctc),
            opt(r.sv),
            r.score.to_string(),
            r.gn_dmd.to_string(),
            opt(r.gn_adv),
            opt(r.gn_ctc),
            opt(r.gn_sv),
            r.gn_total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| LabError::io(path, e))?;
    Ok(())
}
