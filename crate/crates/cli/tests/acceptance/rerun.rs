//! Two full pipeline runs with the same config and seed, compared file by file.

use std::path::{Path, PathBuf};
use std::process::Command;

use distill_lab::schedule::StudentTimeGrid;
use distill_lab_cli::{Precision, RunConfig};

use super::Verdict;

fn small_config(out: &Path) -> RunConfig {
    let mut c = RunConfig { out: out.to_path_buf(), precision: Precision::F32, seed: 11, ..Default::default() };
    c.task.vocab_size = 5;
    c.task.latent_dim = 4;
    c.task.num_speakers = 4;
    c.task.tokens_range = (3, 5);
    c.data.train_examples = 64;
    c.data.eval_examples = 16;
    c.net.model_dim = 8;
    c.net.ff_dim = 16;
    c.net.heads = 2;
    c.net.enc_layers = 1;
    c.net.dec_layers = 1;
    c.net.disc_dim = 8;
    c.teacher.optim.steps = 20;
    c.teacher.optim.batch = 4;
    c.teacher.sampler_steps = 8;
    c.teacher.ema_every = 2;
    for o in [&mut c.asr.optim, &mut c.sv.optim] {
        o.steps = 20;
        o.batch = 4;
    }
    c.asr.dim = 8;
    c.asr.ff_dim = 8;
    c.sv.dim = 8;
    c.sv.ff_dim = 8;
    c.sv.embed_dim = 4;
    c.distill.optim.steps = 6;
    c.distill.optim.batch = 4;
    c.distill.ctc_warmup_steps = 2;
    c.distill.sv_warmup_steps = 3;
    c.distill.grid = StudentTimeGrid::default();
    c.eval.examples = 8;
    c.eval.cv_prompts = 3;
    c.eval.cv_repeats = 4;
    c.eval.uncond_speakers = 2;
    c.eval.uncond_per_speaker = 4;
    c.eval.rtf_reps = 1;
    c.eval.rtf_batch = 2;
    c
}

fn sweep(root: &Path, name: &str) -> Result<PathBuf, String> {
    let out = root.join(name);
    let config = root.join(format!("{name}.json"));
    std::fs::write(&config, small_config(&out).to_json().unwrap()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_distill-lab"))
        .arg("sweep")
        .arg("--config")
        .arg(&config)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("sweep failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(out)
}

fn metrics(run: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(run.join("eval"))
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path().join("metrics.json");
            p.exists().then(|| (p.parent().unwrap().file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        })
        .collect();
    v.sort();
    v
}

pub fn reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let runs = match (sweep(tmp.path(), "first"), sweep(tmp.path(), "second")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Verdict::fail(e),
    };
    let (a, b) = (metrics(&runs.0), metrics(&runs.1));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let detail = format!("{} metrics.json files from two full sweeps ({})", a.len(), names.join(", "));
    if a.len() == 7 && a.len() == b.len() && differing.is_empty() {
        Verdict::pass(format!("{detail} are byte-identical"))
    } else {
        Verdict::fail(format!("{detail}; differing: {differing:?}"))
    }
}
