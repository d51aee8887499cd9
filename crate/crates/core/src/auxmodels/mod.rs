//! Differentiable metric models on latents: a CTC recognizer and a speaker
//! embedder, with their training loops and held-out checks.

pub mod asr;
pub mod ctc;
pub mod sv;

use distill_substrate::{try_value_and_grad, ParameterStore, Real};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::latent::{pack, LatentSequence};
use crate::rng;
use crate::synthtask::{Dataset, Example};
use crate::train::{optimize, StepRecord};

pub use asr::{AsrConfig, LatentAsr};
pub use ctc::{ctc_greedy_decode, ctc_loss, ctc_loss_and_grad, min_frames, BLANK};
pub use sv::{equal_error_rate, sv_loss, LatentSv, SvConfig};

/// Packs a batch of examples, optionally with extra input noise.
fn noisy_batch<T: Real, R: Rng>(batch: &[&Example], noise: f64, r: &mut R) -> (Vec<T>, std::sync::Arc<distill_substrate::Segments>) {
    let seqs: Vec<&LatentSequence> = batch.iter().map(|e| &e.latent).collect();
    let (mut data, seg) = pack::<T>(&seqs);
    if noise > 0.0 {
        for v in &mut data {
            *v += T::lit(noise * r.sample::<f64, _>(StandardNormal));
        }
    }
    (data, seg)
}

fn draw<'a, R: Rng>(data: &'a Dataset, n: usize, r: &mut R) -> Vec<&'a Example> {
    (0..n).map(|_| &data.examples[r.random_range(0..data.len())]).collect()
}

/// Trains the recognizer with CTC on clean latents.
pub fn train_latent_asr<T: Real>(
    model: &LatentAsr,
    data: &Dataset,
    seed: u64,
) -> Result<(ParameterStore<T>, Vec<StepRecord>)> {
    let mut params = model.init_params::<T>(seed);
    let cfg = &model.cfg;
    let log = optimize(
        &mut params,
        &cfg.optim,
        "asr",
        |step, p| {
            let mut r = rng::stream(seed, "asr-batch", step);
            let batch = draw(data, cfg.optim.batch, &mut r);
            let (x, seg) = noisy_batch::<T, _>(&batch, cfg.noise_aug, &mut r);
            let targets: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
            let (loss, g) = try_value_and_grad::<T, crate::LabError, _>(p, |tape, b| {
                let xv = tape.constant(seg.total(), model.latent_dim, x.clone());
                model.ctc_batch_loss(tape, b, xv, &seg, &targets)
            })?;
            Ok((loss.as_f64(), g))
        },
        |_, _, _| Ok(()),
    )?;
    Ok((params, log))
}

/// Trains the speaker embedder as a speaker classifier.
pub fn train_latent_sv<T: Real>(
    model: &LatentSv,
    data: &Dataset,
    seed: u64,
) -> Result<(ParameterStore<T>, Vec<StepRecord>)> {
    let mut params = model.init_params::<T>(seed);
    let cfg = &model.cfg;
    let log = optimize(
        &mut params,
        &cfg.optim,
        "sv",
        |step, p| {
            let mut r = rng::stream(seed, "sv-batch", step);
            let batch = draw(data, cfg.optim.batch, &mut r);
            // Random crops mimic the variable prompt lengths seen at use time.
            let crops: Vec<LatentSequence> = batch
                .iter()
                .map(|e| {
                    let l = e.latent.frames();
                    let len = r.random_range(1.max(l / 4)..=l);
                    let start = r.random_range(0..=l - len);
                    e.latent.slice_frames(start, start + len).expect("crop within latent")
                })
                .collect();
            let refs: Vec<&LatentSequence> = crops.iter().collect();
            let (mut x, seg) = pack::<T>(&refs);
            if cfg.noise_aug > 0.0 {
                for v in &mut x {
                    *v += T::lit(cfg.noise_aug * r.sample::<f64, _>(StandardNormal));
                }
            }
            let speakers: Vec<usize> = batch.iter().map(|e| e.speaker).collect();
            let (loss, g) = try_value_and_grad::<T, crate::LabError, _>(p, |tape, b| {
                let xv = tape.constant(seg.total(), model.latent_dim, x.clone());
                model.class_loss(tape, b, xv, &seg, &speakers)
            })?;
            Ok((loss.as_f64(), g))
        },
        |_, _, _| Ok(()),
    )?;
    Ok((params, log))
}

/// Token error rate of greedy recognition over a dataset.
pub fn asr_error_rate<T: Real>(model: &LatentAsr, params: &ParameterStore<T>, data: &[Example]) -> f64 {
    let (mut errs, mut total) = (0usize, 0usize);
    for chunk in data.chunks(64) {
        let seqs: Vec<&LatentSequence> = chunk.iter().map(|e| &e.latent).collect();
        for (e, hyp) in chunk.iter().zip(model.transcribe(params, &seqs)) {
            errs += crate::evalkit::edit_distance(&e.tokens, &hyp);
            total += e.tokens.len();
        }
    }
    errs as f64 / total.max(1) as f64
}

/// Cosine similarities of all same-speaker and cross-speaker pairs.
pub fn sv_pair_scores<T: Real>(
    model: &LatentSv,
    params: &ParameterStore<T>,
    data: &[Example],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let seqs: Vec<&LatentSequence> = data.iter().map(|e| &e.latent).collect();
    let mut emb = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        emb.extend(model.embed_sequences(params, chunk)?);
    }
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            let c: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum();
            if data[i].speaker == data[j].speaker {
                same.push(c);
            } else {
                cross.push(c);
            }
        }
    }
    Ok((same, cross))
}
