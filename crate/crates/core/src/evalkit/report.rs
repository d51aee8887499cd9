//! Evaluation of one sampler: quality metrics over the eval split, diversity
//! statistics over the panel, and the files that record them.
//!
//! `metrics.json` holds only deterministic quantities. Wall-clock speed is
//! written separately to `timing.json` so reruns compare byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use distill_substrate::{ParameterStore, Real};
use serde::{Deserialize, Serialize};

use super::metrics::{sim, wer};
use super::panel::{Aspect, Features, Panel, PanelFeatures, PanelShape, RtfReport};
use super::requests::continuation_request;
use crate::auxmodels::{LatentAsr, LatentSv};
use crate::error::{LabError, Result};
use crate::rng;
use crate::sampling::{SampleRequest, Sampler};
use crate::synthtask::{oracle_speaker_embed, Dataset, SyntheticTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Eval-split utterances used for WER and SIM.
    pub examples: usize,
    /// Fraction of each utterance's tokens given as the prompt.
    pub prompt_fraction: f64,
    pub cv_prompts: usize,
    pub cv_repeats: usize,
    pub uncond_speakers: usize,
    pub uncond_per_speaker: usize,
    pub rtf_reps: usize,
    pub rtf_batch: usize,
    pub histogram_prompts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            examples: 64,
            prompt_fraction: 1.0 / 3.0,
            cv_prompts: 20,
            cv_repeats: 50,
            uncond_speakers: 4,
            uncond_per_speaker: 50,
            rtf_reps: 3,
            rtf_batch: 8,
            histogram_prompts: 4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, m: &str| Err(LabError::Config { path: format!("eval.{field}"), message: m.into() });
        if self.examples == 0 {
            return bad("examples", "must be positive");
        }
        if !(self.prompt_fraction > 0.0 && self.prompt_fraction < 1.0) {
            return bad("prompt_fraction", "must lie in (0, 1)");
        }
        if self.cv_prompts == 0 {
            return bad("cv_prompts", "must be positive");
        }
        if self.cv_repeats < 2 {
            return bad("cv_repeats", "must be at least 2");
        }
        if self.uncond_speakers == 0 || self.uncond_per_speaker == 0 {
            return bad("uncond_speakers", "unconditional panel must be non-empty");
        }
        if self.rtf_reps == 0 || self.rtf_batch == 0 {
            return bad("rtf_reps", "speed measurement needs repetitions and a batch");
        }
        Ok(())
    }

    pub fn panel_shape(&self) -> PanelShape {
        PanelShape {
            prompts: self.cv_prompts,
            repeats: self.cv_repeats,
            speakers: self.uncond_speakers,
            per_speaker: self.uncond_per_speaker,
            prompt_fraction: self.prompt_fraction,
        }
    }
}

/// Continuation requests for the first `cfg.examples` eval utterances.
pub fn eval_requests(task: &SyntheticTask, data: &Dataset, cfg: &EvalConfig) -> Result<Vec<(usize, SampleRequest)>> {
    let out: Vec<_> = data
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.tokens.len() >= 2)
        .take(cfg.examples)
        .map(|(i, e)| continuation_request(task, e, cfg.prompt_fraction, rng::derive_seed(cfg.seed, "eval", i as u64)).map(|r| (i, r)))
        .collect::<Result<_>>()?;
    if out.len() < cfg.examples {
        return Err(LabError::invalid(format!("eval split has {} usable utterances, {} requested", out.len(), cfg.examples)));
    }
    Ok(out)
}

/// Frozen models and data shared by every evaluation.
pub struct EvalContext<'a, T: Real> {
    pub task: &'a SyntheticTask,
    pub eval: &'a Dataset,
    pub asr: &'a LatentAsr,
    pub asr_params: &'a ParameterStore<T>,
    pub sv: &'a LatentSv,
    pub sv_params: &'a ParameterStore<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: usize,
    pub wer: f64,
    pub wer_oracle: f64,
    pub sim: f64,
    pub sim_oracle: f64,
    pub pitch: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sampler: String,
    pub evals_per_sample: u64,
    pub seed: u64,
    pub samples: usize,
    /// Recognizer WER against the reference text.
    pub wer: f64,
    /// WER of the analytic transcriber.
    pub wer_oracle: f64,
    /// Cosine similarity of learned speaker embeddings, generated region vs prompt.
    pub sim: f64,
    /// Same with the analytic frame-mean embedding.
    pub sim_oracle: f64,
    pub cv_pitch: f64,
    pub cv_prompts: usize,
    pub cv_repeats: usize,
    pub uncond_speakers: usize,
    pub uncond_per_speaker: usize,
    /// `aspect.pairing.against` -> distance, e.g. `pitch.conditional.truth`.
    pub wasserstein: BTreeMap<String, f64>,
    pub reference: Option<String>,
    /// Reference evaluations per sample over this sampler's.
    pub eval_count_ratio: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.wer, self.wer_oracle, self.sim, self.sim_oracle, self.cv_pitch];
        if scalars.iter().chain(self.wasserstein.values()).chain(self.eval_count_ratio.iter()).any(|v| !v.is_finite()) {
            return Err(LabError::invalid("metrics report contains non-finite values"));
        }
        Ok(())
    }
}

/// Panel features of a reference sampler, computed once and reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub label: String,
    pub evals_per_sample: u64,
    pub features: PanelFeatures,
}

impl Reference {
    pub fn compute(sampler: &dyn Sampler, panel: &Panel) -> Result<Self> {
        Ok(Self { label: sampler.label(), evals_per_sample: sampler.evals_per_sample(), features: panel.features(sampler)? })
    }
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub rows: Vec<SampleRow>,
    pub features: PanelFeatures,
    pub truth: PanelFeatures,
    pub reference: Option<PanelFeatures>,
    pub timing: Option<RtfReport>,
}

/// WER and SIM rows for one sampler on the given requests.
pub fn quality_rows<T: Real>(
    ctx: &EvalContext<'_, T>,
    sampler: &dyn Sampler,
    requests: &[(usize, SampleRequest)],
) -> Result<Vec<SampleRow>> {
    let reqs: Vec<SampleRequest> = requests.iter().map(|(_, r)| r.clone()).collect();
    let out = sampler.sample(&reqs)?;
    let refs: Vec<_> = out.iter().collect();
    let hyps = ctx.asr.transcribe(ctx.asr_params, &refs);
    let mut rows = Vec::with_capacity(out.len());
    for (((id, req), x), hyp) in requests.iter().zip(&out).zip(&hyps) {
        let ex = &ctx.eval.examples[*id];
        let prompt = req.prompt.as_ref().ok_or_else(|| LabError::invalid("evaluation request without prompt"))?;
        let gen = x.slice_frames(prompt.frames(), x.frames())?;
        let emb = ctx.sv.embed_sequences(ctx.sv_params, &[&gen, prompt])?;
        let f = Features::of_continuation(x, prompt.frames())?;
        rows.push(SampleRow {
            id: *id,
            wer: wer(&ex.tokens, hyp)?,
            wer_oracle: wer(&ex.tokens, &ctx.task.oracle_transcribe(x))?,
            sim: sim(&emb[0], &emb[1])?,
            sim_oracle: sim(&oracle_speaker_embed(&gen)?, &oracle_speaker_embed(prompt)?)?,
            pitch: f.pitch,
            energy: f.energy,
        });
    }
    Ok(rows)
}

fn mean(rows: &[SampleRow], f: impl Fn(&SampleRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

/// Full evaluation of `sampler`. With a reference, distances to it and the
/// evaluation-count ratio are added.
pub fn evaluate<T: Real>(
    ctx: &EvalContext<'_, T>,
    cfg: &EvalConfig,
    panel: &Panel,
    sampler: &dyn Sampler,
    reference: Option<&Reference>,
) -> Result<Evaluation> {
    cfg.validate()?;
    let requests = eval_requests(ctx.task, ctx.eval, cfg)?;
    let rows = quality_rows(ctx, sampler, &requests)?;
    let features = panel.features(sampler)?;
    let truth = panel.truth();

    let mut wasserstein = BTreeMap::new();
    for aspect in [Aspect::Pitch, Aspect::Energy] {
        let mut against = vec![("truth", &truth)];
        if let Some(r) = reference {
            against.push(("reference", &r.features));
        }
        for (name, other) in against {
            let (c, u) = features.wasserstein(other, aspect)?;
            wasserstein.insert(format!("{}.conditional.{name}", aspect.name()), c);
            wasserstein.insert(format!("{}.unconditional.{name}", aspect.name()), u);
        }
    }
    let report = MetricsReport {
        sampler: sampler.label(),
        evals_per_sample: sampler.evals_per_sample(),
        seed: cfg.seed,
        samples: rows.len(),
        wer: mean(&rows, |r| r.wer),
        wer_oracle: mean(&rows, |r| r.wer_oracle),
        sim: mean(&rows, |r| r.sim),
        sim_oracle: mean(&rows, |r| r.sim_oracle),
        cv_pitch: features.conditional_cv()?,
        cv_prompts: panel.conditional.len(),
        cv_repeats: cfg.cv_repeats,
        uncond_speakers: panel.unconditional.len(),
        uncond_per_speaker: cfg.uncond_per_speaker,
        wasserstein,
        reference: reference.map(|r| r.label.clone()),
        eval_count_ratio: reference.map(|r| r.evals_per_sample as f64 / sampler.evals_per_sample() as f64),
    };
    report.validate()?;
    Ok(Evaluation {
        report,
        rows,
        features,
        truth,
        reference: reference.map(|r| r.features.clone()),
        timing: None,
    })
}

/// Speed requests: the first `rtf_batch` eval utterances.
pub fn speed_requests(task: &SyntheticTask, data: &Dataset, cfg: &EvalConfig) -> Result<Vec<SampleRequest>> {
    let cfg = EvalConfig { examples: cfg.rtf_batch, ..cfg.clone() };
    Ok(eval_requests(task, data, &cfg)?.into_iter().map(|(_, r)| r).collect())
}

/// Writes `metrics.json`, `samples.csv`, `pitch_hist.svg` and, when timed,
/// `timing.json` into `dir`.
pub fn write_evaluation(dir: &Path, ev: &Evaluation, cfg: &EvalConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| LabError::io(p, e))
    };
    write("metrics.json", serde_json::to_string_pretty(&ev.report)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
    for r in &ev.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| LabError::io(dir.join("samples.csv"), e))?;
    write("pitch_hist.svg", pitch_histograms(&ev.features, ev.reference.as_ref(), &ev.truth, cfg.histogram_prompts))?;
    if let Some(t) = &ev.timing {
        write("timing.json", serde_json::to_string_pretty(t)? + "\n")?;
    }
    Ok(())
}

const BINS: usize = 24;

fn bin_counts(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut c = vec![0.0; BINS];
    let width = (hi - lo).max(1e-9) / BINS as f64;
    for &v in values {
        let b = (((v - lo) / width).floor() as isize).clamp(0, BINS as isize - 1) as usize;
        c[b] += 1.0;
    }
    let n = values.len().max(1) as f64;
    c.iter_mut().for_each(|x| *x /= n);
    c
}

/// Conditional pitch-proxy histograms for the first `k` panel prompts: model
/// as filled bars, reference and ground truth as outlines.
pub fn pitch_histograms(model: &PanelFeatures, reference: Option<&PanelFeatures>, truth: &PanelFeatures, k: usize) -> String {
    let k = k.min(model.conditional.len()).max(1);
    let (pw, ph, pad) = (260.0, 160.0, 30.0);
    let width = pad + k as f64 * (pw + pad);
    let height = ph + 2.0 * pad + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let pitches = |g: &[Features]| g.iter().map(|f| f.pitch).collect::<Vec<_>>();
    for i in 0..k.min(model.conditional.len()) {
        let series: Vec<(&str, Vec<f64>)> = [
            Some(("model", pitches(&model.conditional[i]))),
            reference.and_then(|r| r.conditional.get(i)).map(|g| ("reference", pitches(g))),
            truth.conditional.get(i).map(|g| ("truth", pitches(g))),
        ]
        .into_iter()
        .flatten()
        .collect();
        let all = series.iter().flat_map(|(_, v)| v.iter().copied());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if hi - lo < 1e-6 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let x0 = pad + i as f64 * (pw + pad);
        let y0 = pad;
        let hists: Vec<Vec<f64>> = series.iter().map(|(_, v)| bin_counts(v, lo, hi)).collect();
        let top = hists.iter().flatten().copied().fold(1e-9, f64::max);
        let bw = pw / BINS as f64;
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}">prompt {i}</text>"#, y0 - 8.0);
        for (j, ((name, _), h)) in series.iter().zip(&hists).enumerate() {
            let (fill, stroke) = match *name {
                "model" => ("#4c78a8", "none"),
                "reference" => ("none", "#f58518"),
                _ => ("none", "#54a24b"),
            };
            for (b, &c) in h.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let hgt = c / top * ph;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bw:.1}" height="{hgt:.1}" fill="{fill}" fill-opacity="0.7" stroke="{stroke}" stroke-width="1.5"/>"#,
                    x0 + b as f64 * bw,
                    y0 + ph - hgt
                );
            }
            if i == 0 {
                let color = if fill == "none" { stroke } else { fill };
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"#,
                    x0 + 70.0 * j as f64,
                    y0 + ph + 32.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
            y0 + ph,
            x0 + pw,
            y0 + ph
        );
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}">{lo:.3}</text>"#, y0 + ph + 14.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{hi:.3}</text>"#, x0 + pw, y0 + ph + 14.0);
    }
    s.push_str("</svg>\n");
    s
}
