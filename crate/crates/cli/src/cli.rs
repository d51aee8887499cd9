//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use distill_lab::{LabError, Result};

use crate::config::{preset, Precision, RunConfig};
use crate::pipeline::{report, Existing, Run};

/// Environment variable that overrides the worker thread count.
pub const THREADS_ENV: &str = "DISTILL_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "distill-lab", version, about = "Train, distill and evaluate few-step latent sequence generators")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; defaults to `<out>/config.json` when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Worker threads; the DISTILL_LAB_THREADS environment variable wins.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override a config field by dotted path, e.g. `--set distill.lambda_ctc=0`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and eval splits.
    GenData,
    /// Train the diffusion teacher.
    TrainTeacher,
    /// Train the latent recognizer.
    TrainAsr,
    /// Train the latent speaker embedder.
    TrainSv,
    /// Distill a student from the teacher.
    Distill {
        /// Ablation preset; the config's distill section is used as given when omitted.
        #[arg(long)]
        preset: Option<String>,
        /// Student name under `<out>/students`; defaults to the preset or `student`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Generate one continuation.
    Sample {
        /// `teacher`, a student name or a student directory.
        #[arg(long, default_value = "teacher")]
        checkpoint: String,
        /// Continuation tokens, comma separated; defaults to the prompt utterance's own text.
        #[arg(long, value_delimiter = ',')]
        text: Option<Vec<usize>>,
        /// Eval-split utterance whose prefix is the prompt.
        #[arg(long, default_value_t = 0)]
        prompt_id: usize,
        /// Sampling steps; students use a uniform grid of this many times.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint and write its metrics.
    Eval {
        #[arg(long, default_value = "teacher")]
        checkpoint: String,
    },
    /// Combine the evaluations of one or more run directories.
    Report {
        run_dirs: Vec<PathBuf>,
    },
    /// Run every stage and ablation preset, skipping finished outputs.
    Sweep,
}

/// 2 config, 3 missing dependency, 4 divergence, 1 anything else.
pub fn exit_code(e: &LabError) -> u8 {
    match e {
        LabError::Config { .. } => 2,
        LabError::Missing { .. } => 3,
        LabError::Divergence { .. } => 4,
        _ => 1,
    }
}

pub fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, &c.out) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(out)) if out.join("config.json").exists() => RunConfig::load(&out.join("config.json"))?,
        _ => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    if let Some(t) = c.threads {
        cfg.threads = Some(t);
    }
    cfg = cfg.with_overrides(&c.sets)?;
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let t = v.parse().map_err(|_| LabError::Config { path: THREADS_ENV.into(), message: format!("`{v}` is not a thread count") })?;
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(n: Option<usize>) {
    if let Some(n) = n {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Executes one command; returns text for stdout.
pub fn run(cli: Cli) -> Result<String> {
    if let Command::Report { run_dirs } = &cli.command {
        if run_dirs.is_empty() {
            return Err(LabError::Config { path: "report".into(), message: "name at least one run directory".into() });
        }
        return report(run_dirs);
    }
    let cfg = resolve_config(&cli.common)?;
    init_threads(cfg.threads);
    let run = Run::new(cfg)?;
    let refuse = Existing::Refuse;
    Ok(match cli.command {
        Command::GenData => {
            run.gen_data(refuse)?;
            String::new()
        }
        Command::TrainTeacher => {
            run.train_teacher(refuse)?;
            String::new()
        }
        Command::TrainAsr => {
            run.train_asr(refuse)?;
            String::new()
        }
        Command::TrainSv => {
            run.train_sv(refuse)?;
            String::new()
        }
        Command::Distill { preset: p, name } => {
            let dcfg = match &p {
                Some(p) => preset(&run.cfg.distill, p)?,
                None => run.cfg.distill.clone(),
            };
            let name = name.or(p).unwrap_or_else(|| "student".into());
            if name == "teacher" || name.contains('/') {
                return Err(LabError::Config { path: "name".into(), message: format!("`{name}` cannot name a student") });
            }
            run.distill(&name, &dcfg, refuse)?;
            String::new()
        }
        Command::Sample { checkpoint, text, prompt_id, steps } => {
            let o = run.sample(&checkpoint, text, prompt_id, steps, run.cfg.seed)?;
            serde_json::to_string_pretty(&o)?
        }
        Command::Eval { checkpoint } => match run.eval(&checkpoint, refuse)? {
            Some(r) => serde_json::to_string_pretty(&r)?,
            None => String::new(),
        },
        Command::Sweep => run.sweep()?,
        Command::Report { .. } => unreachable!("handled above"),
    })
}
