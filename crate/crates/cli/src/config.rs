//! Run configuration: one JSON document, dotted-path overrides and ablation
//! presets.

use std::path::{Path, PathBuf};

use distill_lab::auxmodels::{AsrConfig, SvConfig};
use distill_lab::distill::DistillConfig;
use distill_lab::evalkit::EvalConfig;
use distill_lab::nets::NetConfig;
use distill_lab::schedule::{ScheduleParams, StudentTimeGrid};
use distill_lab::synthtask::TaskConfig;
use distill_lab::teacher::TeacherConfig;
use distill_lab::{LabError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_examples: usize,
    pub eval_examples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_examples: 4000, eval_examples: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,
    pub threads: Option<usize>,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub net: NetConfig,
    pub schedule: ScheduleParams,
    pub teacher: TeacherConfig,
    pub asr: AsrConfig,
    pub sv: SvConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            precision: Precision::F32,
            threads: None,
            task: TaskConfig::default(),
            data: DataConfig::default(),
            net: NetConfig::default(),
            schedule: ScheduleParams::default(),
            teacher: TeacherConfig::default(),
            asr: AsrConfig::default(),
            sv: SvConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_error(path: impl Into<String>, message: impl std::fmt::Display) -> LabError {
    LabError::Config { path: path.into(), message: message.to_string() }
}

/// Deserializes with the failing field's path in the error.
pub fn from_value(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| config_error(e.path().to_string(), e.inner()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| config_error(e.path().to_string(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                LabError::Config { .. } => e,
                other => config_error(section, other),
            })
        };
        wrap("task", self.task.validate())?;
        wrap("net", self.net.validate())?;
        wrap("teacher", self.teacher.validate())?;
        wrap("asr", self.asr.validate())?;
        wrap("sv", self.sv.validate())?;
        wrap("distill", self.distill.validate())?;
        wrap("eval", self.eval.validate())?;
        if self.data.train_examples == 0 {
            return Err(config_error("data.train_examples", "must be positive"));
        }
        if self.data.eval_examples < self.eval.examples {
            return Err(config_error("data.eval_examples", "smaller than eval.examples"));
        }
        if self.threads == Some(0) {
            return Err(config_error("threads", "must be positive"));
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            let (path, raw) = s.split_once('=').ok_or_else(|| config_error(s.as_str(), "override must look like key.path=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, path, value)?;
        }
        let cfg = from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| config_error(parts[..i].join("."), "is not an object"))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*key) {
                return Err(config_error(path, "unknown field"));
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*key).ok_or_else(|| config_error(parts[..=i].join("."), "unknown field"))?;
    }
    Err(config_error(path, "empty override path"))
}

/// Ablation rows: the teacher itself and the student variants.
pub const PRESETS: [&str; 7] = ["teacher", "dmd2-n1", "dmd2-n4", "ctc-only", "sv-only", "full", "small-batch"];

/// Student presets in sweep order.
pub const STUDENT_PRESETS: [&str; 6] = ["dmd2-n1", "dmd2-n4", "ctc-only", "sv-only", "full", "small-batch"];

/// Distillation config for a student preset, derived from `base`.
pub fn preset(base: &DistillConfig, name: &str) -> Result<DistillConfig> {
    let mut c = base.clone();
    match name {
        "dmd2-n1" => {
            c.grid = StudentTimeGrid::new(vec![1.0])?;
            c.lambda_ctc = 0.0;
            c.lambda_sv = 0.0;
        }
        "dmd2-n4" => {
            c.lambda_ctc = 0.0;
            c.lambda_sv = 0.0;
        }
        "ctc-only" => c.lambda_sv = 0.0,
        "sv-only" => c.lambda_ctc = 0.0,
        "full" => {}
        "small-batch" => c.optim.batch = (c.optim.batch / 4).max(1),
        "teacher" => return Err(config_error("preset", "the teacher preset has no distillation config")),
        other => return Err(config_error("preset", format!("unknown preset `{other}`; expected one of {PRESETS:?}"))),
    }
    Ok(c)
}
