//! Pipeline stages over a run directory.
//!
//! ```text
//! <out>/config.json              base config of the run
//! <out>/manifest.json            seeds, precision, tool version
//! <out>/data/{train,eval}.*      generated splits
//! <out>/{teacher,asr,sv}/        checkpoint.*, log.csv, config.json
//! <out>/students/<name>/         checkpoint.*, log.csv, config.json
//! <out>/eval/<name>/             metrics.json, samples.csv, pitch_hist.svg, timing.json
//! <out>/samples/                 sampled latents
//! ```
//!
//! A stage refuses to write into an output directory that already exists.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use distill_lab::auxmodels::{train_latent_asr, train_latent_sv, LatentAsr, LatentSv};
use distill_lab::distill::{multi_step_sample, write_distill_log, DistillConfig, Distiller, StudentSampler};
use distill_lab::evalkit::{
    build_panel, evaluate, rtf_ratio, speed_requests, write_evaluation, EvalContext, MetricsReport, Reference,
};
use distill_lab::nets::{Discriminator, DitNet};
use distill_lab::rng::derive_seed;
use distill_lab::sampling::{SampleRequest, Sampler};
use distill_lab::schedule::StudentTimeGrid;
use distill_lab::synthtask::{estimate_length, Dataset, SyntheticTask};
use distill_lab::teacher::{teacher_sample, train_teacher, TeacherSampler};
use distill_lab::train::write_step_log;
use distill_lab::{LabError, LatentSequence, Result};
use distill_substrate::{Archive, ParameterStore, Real};
use serde::{Deserialize, Serialize};

use crate::config::{preset, Precision, RunConfig, STUDENT_PRESETS};

/// What to do when a stage's output already exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Existing {
    Refuse,
    Skip,
}

macro_rules! by_precision {
    ($p:expr, $f:ident ( $($a:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub task: SyntheticTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub checkpoint: String,
    pub evals: u64,
    pub frames: usize,
    pub prompt_frames: usize,
    pub tokens: Vec<usize>,
    pub oracle_tokens: Vec<usize>,
    pub asr_tokens: Option<Vec<usize>>,
    pub path: PathBuf,
}

fn missing(what: impl Into<String>, hint: impl Into<String>) -> LabError {
    LabError::Missing { what: what.into(), hint: hint.into() }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| LabError::io(d, e))?;
    }
    std::fs::write(path, body).map_err(|e| LabError::io(path, e))
}

fn load_archive(stem: &Path, what: &str, hint: &str) -> Result<Archive> {
    if !stem.with_extension("json").exists() {
        return Err(missing(format!("{what} at {}", stem.with_extension("json").display()), hint));
    }
    Ok(Archive::load(stem)?)
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let task = SyntheticTask::new(cfg.task.clone())?;
        Ok(Self { dir: cfg.out.clone(), cfg, task })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn hint(&self, cmd: &str) -> String {
        format!("run `distill-lab {cmd} --out {}` first", self.dir.display())
    }

    /// Returns false when the output exists and should be skipped.
    fn claim(&self, dir: &Path, existing: Existing) -> Result<bool> {
        if dir.exists() {
            return match existing {
                Existing::Refuse => Err(LabError::Exists(dir.to_path_buf())),
                Existing::Skip => Ok(false),
            };
        }
        Ok(true)
    }

    fn record_config(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("config.json"), &self.cfg.to_json()?)
    }

    fn ensure_root(&self) -> Result<()> {
        let cfg_path = self.path("config.json");
        if !cfg_path.exists() {
            write_file(&cfg_path, &self.cfg.to_json()?)?;
            let manifest = serde_json::json!({
                "tool": env!("CARGO_PKG_NAME"),
                "version": env!("CARGO_PKG_VERSION"),
                "seed": self.cfg.seed,
                "task_seed": self.cfg.task.master_seed,
                "precision": self.cfg.precision,
            });
            write_file(&self.path("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
        }
        Ok(())
    }

    pub fn net(&self) -> Result<DitNet> {
        DitNet::new(self.cfg.net.clone(), self.cfg.task.vocab_size, self.cfg.task.latent_dim)
    }

    pub fn gen_data(&self, existing: Existing) -> Result<()> {
        let dir = self.path("data");
        if !self.claim(&dir, existing)? {
            return Ok(());
        }
        self.ensure_root()?;
        self.task.dataset("train", self.cfg.data.train_examples)?.save(&dir.join("train"))?;
        self.task.dataset("eval", self.cfg.data.eval_examples)?.save(&dir.join("eval"))?;
        self.record_config(&dir)
    }

    pub fn split(&self, name: &str) -> Result<Dataset> {
        let stem = self.path("data").join(name);
        if !stem.with_extension("json").exists() {
            return Err(missing(format!("{name} split at {}", stem.with_extension("json").display()), self.hint("gen-data")));
        }
        let d = Dataset::load(&stem)?;
        if d.task != self.cfg.task {
            return Err(LabError::Config { path: "task".into(), message: "data was generated with a different task config".into() });
        }
        Ok(d)
    }

    fn check_meta(&self, a: &Archive, key: &str, expected: serde_json::Value, what: &str) -> Result<()> {
        if a.metadata(key) != Some(&expected) {
            return Err(LabError::Config {
                path: key.into(),
                message: format!("{what} was trained with a different `{key}` config"),
            });
        }
        Ok(())
    }

    pub fn train_teacher(&self, existing: Existing) -> Result<()> {
        by_precision!(self.cfg.precision, train_teacher_stage(self, existing))
    }

    pub fn train_asr(&self, existing: Existing) -> Result<()> {
        by_precision!(self.cfg.precision, train_asr_stage(self, existing))
    }

    pub fn train_sv(&self, existing: Existing) -> Result<()> {
        by_precision!(self.cfg.precision, train_sv_stage(self, existing))
    }

    /// Distills the student `name` with `dcfg`.
    pub fn distill(&self, name: &str, dcfg: &DistillConfig, existing: Existing) -> Result<()> {
        by_precision!(self.cfg.precision, distill_stage(self, name, dcfg, existing))
    }

    pub fn sample(
        &self,
        checkpoint: &str,
        text: Option<Vec<usize>>,
        prompt_id: usize,
        steps: Option<usize>,
        seed: u64,
    ) -> Result<SampleOutcome> {
        by_precision!(self.cfg.precision, sample_stage(self, checkpoint, text, prompt_id, steps, seed))
    }

    pub fn eval(&self, checkpoint: &str, existing: Existing) -> Result<Option<MetricsReport>> {
        by_precision!(self.cfg.precision, eval_stage(self, checkpoint, existing))
    }

    /// Every stage and preset, skipping outputs that already exist; returns
    /// the comparison table.
    pub fn sweep(&self) -> Result<String> {
        let e = Existing::Skip;
        self.gen_data(e)?;
        self.train_teacher(e)?;
        self.train_asr(e)?;
        self.train_sv(e)?;
        self.eval("teacher", e)?;
        for name in STUDENT_PRESETS {
            self.distill(name, &preset(&self.cfg.distill, name)?, e)?;
            self.eval(name, e)?;
        }
        let table = report(std::slice::from_ref(&self.dir))?;
        write_file(&self.path("report.md"), &table)?;
        Ok(table)
    }

    fn student_dir(&self, checkpoint: &str) -> PathBuf {
        if checkpoint.contains('/') {
            PathBuf::from(checkpoint)
        } else {
            self.path("students").join(checkpoint)
        }
    }

    fn teacher_params<T: Real>(&self) -> Result<ParameterStore<T>> {
        let a = load_archive(&self.path("teacher/checkpoint"), "teacher checkpoint", &self.hint("train-teacher"))?;
        self.check_meta(&a, "net", serde_json::to_value(&self.cfg.net)?, "teacher")?;
        self.check_meta(&a, "task", serde_json::to_value(&self.cfg.task)?, "teacher")?;
        Ok(a.params("ema")?)
    }

    fn asr<T: Real>(&self) -> Result<(LatentAsr, ParameterStore<T>)> {
        let a = load_archive(&self.path("asr/checkpoint"), "recognizer checkpoint", &self.hint("train-asr"))?;
        self.check_meta(&a, "asr", serde_json::to_value(&self.cfg.asr)?, "recognizer")?;
        let m = LatentAsr::new(self.cfg.asr.clone(), self.cfg.task.vocab_size, self.cfg.task.latent_dim)?;
        Ok((m, a.params("p")?))
    }

    fn sv<T: Real>(&self) -> Result<(LatentSv, ParameterStore<T>)> {
        let a = load_archive(&self.path("sv/checkpoint"), "speaker-embedder checkpoint", &self.hint("train-sv"))?;
        self.check_meta(&a, "sv", serde_json::to_value(&self.cfg.sv)?, "speaker embedder")?;
        let m = LatentSv::new(self.cfg.sv.clone(), self.cfg.task.latent_dim, self.cfg.task.num_speakers)?;
        Ok((m, a.params("p")?))
    }

    fn teacher_sampler<T: Real>(&self, steps: Option<usize>) -> Result<TeacherSampler<T>> {
        Ok(TeacherSampler {
            net: self.net()?,
            params: self.teacher_params()?,
            steps: steps.unwrap_or(self.cfg.teacher.sampler_steps),
            guidance: self.cfg.teacher.guidance,
            schedule: self.cfg.schedule,
        })
    }

    fn student_sampler<T: Real>(&self, checkpoint: &str, steps: Option<usize>) -> Result<StudentSampler<T>> {
        let dir = self.student_dir(checkpoint);
        let a = load_archive(&dir.join("checkpoint"), &format!("student `{checkpoint}`"), &self.hint(&format!("distill --preset {checkpoint}")))?;
        self.check_meta(&a, "net", serde_json::to_value(&self.cfg.net)?, "student")?;
        let grid = match steps {
            Some(n) => StudentTimeGrid::uniform(n)?,
            None => serde_json::from_value(
                a.metadata("grid").cloned().ok_or_else(|| LabError::invalid("student checkpoint lacks its time grid"))?,
            )?,
        };
        Ok(StudentSampler { net: self.net()?, params: a.params("gen")?, grid, schedule: self.cfg.schedule })
    }
}

fn save_params<T: Real>(stem: &Path, parts: &[(&str, &ParameterStore<T>)], meta: &[(&str, serde_json::Value)]) -> Result<()> {
    let mut a = Archive::new();
    for (k, v) in meta {
        a.set_metadata(k, v.clone());
    }
    for (prefix, p) in parts {
        a.add_params(prefix, p)?;
    }
    a.save(stem)?;
    Ok(())
}

fn train_teacher_stage<T: Real>(run: &Run, existing: Existing) -> Result<()> {
    let dir = run.path("teacher");
    if !run.claim(&dir, existing)? {
        return Ok(());
    }
    let train = run.split("train")?;
    let net = run.net()?;
    log::info!("training teacher for {} steps", run.cfg.teacher.optim.steps);
    let out = train_teacher::<T>(&net, &run.cfg.teacher, &run.cfg.schedule, &train, derive_seed(run.cfg.seed, "teacher", 0))?;
    save_params(
        &dir.join("checkpoint"),
        &[("raw", &out.raw), ("ema", &out.ema)],
        &[
            ("kind", "teacher".into()),
            ("net", serde_json::to_value(&run.cfg.net)?),
            ("task", serde_json::to_value(&run.cfg.task)?),
        ],
    )?;
    write_step_log(&dir.join("log.csv"), &out.log)?;
    run.record_config(&dir)
}

fn train_asr_stage<T: Real>(run: &Run, existing: Existing) -> Result<()> {
    let dir = run.path("asr");
    if !run.claim(&dir, existing)? {
        return Ok(());
    }
    let train = run.split("train")?;
    let m = LatentAsr::new(run.cfg.asr.clone(), run.cfg.task.vocab_size, run.cfg.task.latent_dim)?;
    let (p, log) = train_latent_asr::<T>(&m, &train, derive_seed(run.cfg.seed, "asr", 0))?;
    save_params(&dir.join("checkpoint"), &[("p", &p)], &[("kind", "asr".into()), ("asr", serde_json::to_value(&run.cfg.asr)?)])?;
    write_step_log(&dir.join("log.csv"), &log)?;
    run.record_config(&dir)
}

fn train_sv_stage<T: Real>(run: &Run, existing: Existing) -> Result<()> {
    let dir = run.path("sv");
    if !run.claim(&dir, existing)? {
        return Ok(());
    }
    let train = run.split("train")?;
    let m = LatentSv::new(run.cfg.sv.clone(), run.cfg.task.latent_dim, run.cfg.task.num_speakers)?;
    let (p, log) = train_latent_sv::<T>(&m, &train, derive_seed(run.cfg.seed, "sv", 0))?;
    save_params(&dir.join("checkpoint"), &[("p", &p)], &[("kind", "sv".into()), ("sv", serde_json::to_value(&run.cfg.sv)?)])?;
    write_step_log(&dir.join("log.csv"), &log)?;
    run.record_config(&dir)
}

fn distill_stage<T: Real>(run: &Run, name: &str, dcfg: &DistillConfig, existing: Existing) -> Result<()> {
    let dir = run.student_dir(name);
    if !run.claim(&dir, existing)? {
        return Ok(());
    }
    dcfg.validate()?;
    let teacher = run.teacher_params::<T>()?;
    let asr = if dcfg.lambda_ctc > 0.0 { Some(run.asr::<T>()?) } else { None };
    let sv = if dcfg.lambda_sv > 0.0 { Some(run.sv::<T>()?) } else { None };
    let train = run.split("train")?;
    let net = run.net()?;
    let disc = Discriminator::new(run.cfg.net.clone(), run.cfg.task.vocab_size)?;
    let d = Distiller {
        cfg: dcfg,
        net: &net,
        disc: &disc,
        schedule: run.cfg.schedule,
        teacher: &teacher,
        asr: asr.as_ref().map(|(m, p)| (m, p)),
        sv: sv.as_ref().map(|(m, p)| (m, p)),
    };
    log::info!("distilling `{name}` for {} steps", dcfg.optim.steps);
    let (state, log) = d.run(&train, derive_seed(run.cfg.seed, "distill", 0))?;
    save_params(
        &dir.join("checkpoint"),
        &[("gen", &state.gen), ("score", &state.score), ("disc", &state.disc)],
        &[
            ("kind", "student".into()),
            ("preset", name.into()),
            ("grid", serde_json::to_value(&dcfg.grid)?),
            ("net", serde_json::to_value(&run.cfg.net)?),
            ("distill", serde_json::to_value(dcfg)?),
        ],
    )?;
    write_distill_log(&dir.join("log.csv"), &log)?;
    let cfg = RunConfig { distill: dcfg.clone(), ..run.cfg.clone() };
    write_file(&dir.join("config.json"), &cfg.to_json()?)
}

fn sample_stage<T: Real>(
    run: &Run,
    checkpoint: &str,
    text: Option<Vec<usize>>,
    prompt_id: usize,
    steps: Option<usize>,
    seed: u64,
) -> Result<SampleOutcome> {
    let eval = run.split("eval")?;
    let ex = eval
        .examples
        .get(prompt_id)
        .ok_or_else(|| LabError::invalid(format!("prompt id {prompt_id} outside the eval split of {}", eval.len())))?;
    let n = ex.tokens.len();
    let p_tok = ((n as f64 * run.cfg.eval.prompt_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let p_frames = p_tok * run.task.speaker(ex.speaker)?.rate;
    let rest = text.unwrap_or_else(|| ex.tokens[p_tok..].to_vec());
    if let Some(t) = rest.iter().find(|&&t| t >= run.cfg.task.vocab_size) {
        return Err(LabError::invalid(format!("token {t} outside the vocabulary of {}", run.cfg.task.vocab_size)));
    }
    let mut tokens = ex.tokens[..p_tok].to_vec();
    tokens.extend(&rest);
    let total = p_frames + if rest.is_empty() { 0 } else { estimate_length(&rest, p_tok, p_frames)? };
    let req = SampleRequest { tokens: tokens.clone(), prompt: Some(ex.latent.slice_frames(0, p_frames)?), total_frames: total, seed };
    let (latent, evals): (LatentSequence, u64) = if checkpoint == "teacher" {
        let s = run.teacher_sampler::<T>(steps)?;
        let (x, evals) = teacher_sample(&s.net, &s.params, &[req], s.steps, s.guidance, &s.schedule, None)?;
        (x.into_iter().next().expect("one request"), evals)
    } else {
        let s = run.student_sampler::<T>(checkpoint, steps)?;
        let (x, evals) = multi_step_sample(&s.net, &s.params, &[req], &s.grid, &s.schedule, None)?;
        (x.into_iter().next().expect("one request"), evals)
    };
    log::info!("sampled {} frames with {evals} network evaluations", latent.frames());
    let asr_tokens = match run.asr::<T>() {
        Ok((m, p)) => Some(m.transcribe(&p, &[&latent]).remove(0)),
        Err(LabError::Missing { .. }) => None,
        Err(e) => return Err(e),
    };
    let label = checkpoint.replace('/', "_");
    let stem = run.path("samples").join(format!("{label}-p{prompt_id}-s{seed}"));
    let mut a = Archive::new();
    a.set_metadata("checkpoint", checkpoint.into());
    a.set_metadata("tokens", serde_json::to_value(&tokens)?);
    a.set_metadata("prompt_frames", p_frames.into());
    a.set_metadata("evals", evals.into());
    a.add_real("latent", &[latent.frames(), latent.dim()], latent.data())?;
    let path = a.save(&stem)?;
    Ok(SampleOutcome {
        checkpoint: checkpoint.into(),
        evals,
        frames: latent.frames(),
        prompt_frames: p_frames,
        tokens,
        oracle_tokens: run.task.oracle_transcribe(&latent),
        asr_tokens,
        path,
    })
}

fn eval_stage<T: Real>(run: &Run, checkpoint: &str, existing: Existing) -> Result<Option<MetricsReport>> {
    let label = checkpoint.trim_end_matches('/').rsplit('/').next().unwrap_or(checkpoint).to_string();
    let dir = run.path("eval").join(&label);
    if !run.claim(&dir, existing)? {
        return Ok(None);
    }
    let eval = run.split("eval")?;
    let (asr, ap) = run.asr::<T>()?;
    let (sv, sp) = run.sv::<T>()?;
    let ctx = EvalContext { task: &run.task, eval: &eval, asr: &asr, asr_params: &ap, sv: &sv, sv_params: &sp };
    let ecfg = &run.cfg.eval;
    let panel = build_panel(&run.task, &ecfg.panel_shape(), ecfg.seed)?;
    let teacher = run.teacher_sampler::<T>(None)?;
    let mut ev = if checkpoint == "teacher" {
        evaluate(&ctx, ecfg, &panel, &teacher, None)?
    } else {
        let student = run.student_sampler::<T>(checkpoint, None)?;
        let reference = cached_reference(run, &teacher, &panel)?;
        let mut ev = evaluate(&ctx, ecfg, &panel, &student, Some(&reference))?;
        let reqs = speed_requests(&run.task, &eval, ecfg)?;
        ev.timing = Some(rtf_ratio(&teacher, &student, &reqs, ecfg.rtf_reps)?);
        ev
    };
    if checkpoint == "teacher" {
        // the teacher's own panel doubles as the reference for students
        let r = Reference { label: teacher.label(), evals_per_sample: teacher.evals_per_sample(), features: ev.features.clone() };
        store_reference(run, &r)?;
        ev.reference = None;
    }
    write_evaluation(&dir, &ev, ecfg)?;
    Ok(Some(ev.report))
}

#[derive(Serialize, Deserialize)]
struct StoredReference {
    eval: distill_lab::evalkit::EvalConfig,
    reference: Reference,
}

fn reference_path(run: &Run) -> PathBuf {
    run.path("eval").join("reference.json")
}

fn store_reference(run: &Run, r: &Reference) -> Result<()> {
    let s = StoredReference { eval: run.cfg.eval.clone(), reference: r.clone() };
    write_file(&reference_path(run), &serde_json::to_string(&s)?)
}

fn cached_reference<T: Real>(run: &Run, teacher: &TeacherSampler<T>, panel: &distill_lab::evalkit::Panel) -> Result<Reference> {
    let p = reference_path(run);
    if let Ok(text) = std::fs::read_to_string(&p) {
        if let Ok(s) = serde_json::from_str::<StoredReference>(&text) {
            if s.eval == run.cfg.eval && s.reference.label == teacher.label() {
                return Ok(s.reference);
            }
        }
    }
    let r = Reference::compute(teacher, panel)?;
    store_reference(run, &r)?;
    Ok(r)
}

/// Comparison table over the evaluations found in each run directory.
pub fn report(run_dirs: &[PathBuf]) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "| run | model | evals/sample | WER | WER (oracle) | SIM | SIM (oracle) | CV pitch | W pitch cond | W pitch uncond |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
    let mut rows = 0;
    for run in run_dirs {
        let eval_dir = run.join("eval");
        let mut found: BTreeMap<usize, Vec<(String, MetricsReport)>> = BTreeMap::new();
        let entries = std::fs::read_dir(&eval_dir).map_err(|e| LabError::io(&eval_dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| LabError::io(&eval_dir, e))?;
            let m = entry.path().join("metrics.json");
            if !m.exists() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&m).map_err(|e| LabError::io(&m, e))?;
            let r: MetricsReport = serde_json::from_str(&text)?;
            let order = crate::config::PRESETS.iter().position(|p| *p == name).unwrap_or(usize::MAX);
            found.entry(order).or_default().push((name, r));
        }
        for group in found.values_mut() {
            group.sort_by(|a, b| a.0.cmp(&b.0));
            for (name, r) in group.iter() {
                let w = |k: &str| {
                    r.wasserstein
                        .get(&format!("pitch.{k}.reference"))
                        .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
                };
                let _ = writeln!(
                    s,
                    "| {} | {name} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
                    run.display(),
                    r.evals_per_sample,
                    r.wer,
                    r.wer_oracle,
                    r.sim,
                    r.sim_oracle,
                    r.cv_pitch,
                    w("conditional"),
                    w("unconditional"),
                );
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(missing("evaluations", "run `distill-lab eval` on at least one checkpoint"));
    }
    Ok(s)
}
