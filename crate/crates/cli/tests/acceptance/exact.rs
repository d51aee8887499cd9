//! Exact property checks: gradients, CTC, schedule identities, the DMD fixed
//! point and prompt fidelity of few-step sampling.

use distill_lab::auxmodels::{ctc_loss, min_frames, sv_loss, AsrConfig, LatentAsr, LatentSv, SvConfig, BLANK};
use distill_lab::distill::{lsgan_discriminator, lsgan_generator, multi_step_sample, DistillConfig, Distiller, GenBatch};
use distill_lab::latent::PromptMask;
use distill_lab::nets::{DitBatch, DitNet, Discriminator, NetConfig};
use distill_lab::sampling::{SampleRequest, StepTrace};
use distill_lab::schedule::{base_alpha_sigma, diffuse, recover_eps, recover_x0, shifted_alpha_sigma, velocity, ScheduleParams, StudentTimeGrid};
use distill_lab::synthtask::{Dataset, SyntheticTask, TaskConfig};
use distill_lab::teacher::{diffusion_loss, draw_diffusion};
use distill_lab::{rng, LabError, LatentSequence};
use distill_substrate::gradcheck::{numeric_grad, store_relative_error};
use distill_substrate::{try_value_and_grad, Bound, DenseArray, ParameterStore, Segments, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Verdict;

const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 3;

fn tiny_task() -> TaskConfig {
    TaskConfig { vocab_size: 4, latent_dim: 3, num_speakers: 4, rate_range: (1, 2), tokens_range: (2, 3), ..Default::default() }
}

fn tiny_net() -> NetConfig {
    NetConfig { model_dim: 8, ff_dim: 8, heads: 2, enc_layers: 1, dec_layers: 2, cond_dropout: 0.1, disc_dim: 8, disc_layers: 1 }
}

fn jitter(p: &mut ParameterStore<f64>, seed: u64, scale: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (_, a) in p.iter_mut() {
        for v in a.data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
}

/// Relative error between the tape gradient and central differences of the
/// same loss evaluated forward only.
fn loss_grad_error<F>(params: &ParameterStore<f64>, loss: F) -> f64
where
    F: Fn(&mut Tape<f64>, &Bound) -> distill_lab::Result<Var>,
{
    let (_, analytic) = try_value_and_grad::<f64, LabError, _>(params, |t, p| loss(t, p)).unwrap();
    let numeric = numeric_grad(params, FD_STEP, |s| {
        let mut t = Tape::new();
        let p = t.bind(s, false);
        let l = loss(&mut t, &p).unwrap();
        t.scalar(l)
    });
    store_relative_error(&analytic, &numeric)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn primitive_error(shapes: &[(usize, usize)], scale: f64, seed: u64, build: &Build) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        store.insert(format!("in{i}"), DenseArray::from_vec(&[rows, cols], data).unwrap()).unwrap();
    }
    let n = shapes.len();
    loss_grad_error(&store, |t, p| {
        let ins: Vec<Var> = (0..n).map(|i| p.get(&format!("in{i}"))).collect();
        let y = build(t, &ins);
        let (rows, cols) = t.shape(y);
        let mut wr = ChaCha8Rng::seed_from_u64(seed + 7);
        let w = t.constant(rows, cols, (0..rows * cols).map(|_| wr.random_range(-1.0..1.0)).collect());
        let prod = t.mul(y, w);
        Ok(t.sum(prod))
    })
}

fn primitives() -> Vec<(&'static str, Vec<Vec<(usize, usize)>>, f64, Box<Build>)> {
    let same = |shapes: &[(usize, usize)], k: usize| shapes.iter().map(|&s| vec![s; k]).collect::<Vec<_>>();
    let seg = Segments::from_lengths(&[3, 2]);
    let (s1, s2, s3, s4) = (seg.clone(), seg.clone(), seg.clone(), seg.clone());
    let kseg = Segments::from_lengths(&[2, 4]);
    vec![
        ("matmul", vec![vec![(4, 3), (3, 2)], vec![(1, 5), (5, 4)], vec![(6, 2), (2, 7)]], 1.0, Box::new(|t: &mut Tape<f64>, x: &[Var]| t.matmul(x[0], x[1])) as Box<Build>),
        ("linear", vec![vec![(4, 3), (3, 3), (1, 3)], vec![(2, 5), (5, 2), (1, 2)], vec![(7, 4), (4, 6), (1, 6)]], 1.0, Box::new(|t, x| t.linear(x[0], x[1], Some(x[2])))),
        ("add", same(&[(3, 4), (1, 6), (5, 2)], 2), 1.0, Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", same(&[(3, 4), (1, 6), (5, 2)], 2), 1.0, Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", same(&[(3, 4), (1, 6), (5, 2)], 2), 1.0, Box::new(|t, x| t.mul(x[0], x[1]))),
        ("row_dot", same(&[(3, 4), (1, 6), (5, 2)], 2), 1.0, Box::new(|t, x| t.row_dot(x[0], x[1]))),
        ("mul_row", vec![vec![(3, 4), (1, 4)], vec![(1, 2), (1, 2)], vec![(6, 5), (1, 5)]], 1.0, Box::new(|t, x| t.mul_row(x[0], x[1]))),
        ("add_bias", vec![vec![(3, 4), (1, 4)], vec![(1, 2), (1, 2)], vec![(6, 5), (1, 5)]], 1.0, Box::new(|t, x| t.add_bias(x[0], x[1]))),
        ("scale", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.scale(x[0], -2.5))),
        ("add_scalar", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.add_scalar(x[0], 0.3))),
        ("square", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.square(x[0]))),
        ("silu", same(&[(3, 4), (1, 7), (5, 3)], 1), 2.0, Box::new(|t, x| t.silu(x[0]))),
        ("sum", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.sum(x[0]))),
        ("mean", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.mean(x[0]))),
        ("row_sum", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.row_sum(x[0]))),
        ("log_softmax", same(&[(3, 4), (1, 7), (5, 3)], 1), 2.0, Box::new(|t, x| t.log_softmax(x[0]))),
        ("softmax", same(&[(3, 4), (1, 7), (5, 3)], 1), 2.0, Box::new(|t, x| t.softmax(x[0]))),
        ("l2_normalize_rows", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.l2_normalize_rows(x[0]))),
        ("layer_norm", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.layer_norm(x[0], 1e-6))),
        ("slice_cols", same(&[(3, 4), (1, 7), (5, 3)], 1), 1.0, Box::new(|t, x| t.slice_cols(x[0], 1, 3))),
        ("swiglu", same(&[(3, 4), (1, 8), (5, 6)], 1), 2.0, Box::new(|t, x| t.swiglu(x[0]))),
        ("gather_rows", same(&[(4, 3), (2, 5), (6, 2)], 1), 1.0, Box::new(|t, x| {
            let r = t.shape(x[0]).0;
            t.gather_rows(x[0], &[r - 1, 0, r - 1])
        })),
        ("embedding", same(&[(5, 3), (2, 4), (8, 2)], 1), 1.0, Box::new(|t, x| {
            let v = t.shape(x[0]).0;
            t.embedding(x[0], &[1, 0, v - 1, 1])
        })),
        ("concat_cols", vec![vec![(3, 2), (3, 1)], vec![(1, 4), (1, 4)], vec![(5, 3), (5, 2)]], 1.0, Box::new(|t, x| t.concat_cols(&[x[0], x[1], x[0]]))),
        ("concat_rows", vec![vec![(2, 3), (1, 3)], vec![(4, 1), (4, 1)], vec![(3, 5), (2, 5)]], 1.0, Box::new(|t, x| t.concat_rows(&[x[0], x[1], x[0]]))),
        ("modulate", vec![vec![(5, 4), (2, 4), (2, 4)]; 3], 1.0, Box::new(move |t, x| t.modulate(x[0], x[1], x[2], &s1))),
        ("seg_mean", vec![vec![(5, 3)]; 3], 1.0, Box::new(move |t, x| t.seg_mean(x[0], &s2))),
        ("seg_expand", vec![vec![(2, 3)]; 3], 1.0, Box::new(move |t, x| t.seg_expand(x[0], &s3))),
        ("attention", vec![vec![(5, 4), (6, 4), (6, 4)]; 3], 1.5, Box::new(move |t, x| t.attention(x[0], x[1], x[2], &s4, &kseg, 2))),
    ]
}

fn fixture_data(task: &SyntheticTask, n: usize) -> Dataset {
    task.dataset("train", n).unwrap()
}

fn loss_errors() -> Vec<(&'static str, f64)> {
    let task = SyntheticTask::new(tiny_task()).unwrap();
    let tc = task.config().clone();
    let data = fixture_data(&task, 24);
    let net = DitNet::new(tiny_net(), tc.vocab_size, tc.latent_dim).unwrap();
    let disc = Discriminator::new(tiny_net(), tc.vocab_size).unwrap();
    let schedule = ScheduleParams::default();
    let mut out = Vec::new();

    for k in 0..INSTANCES {
        let mut p = net.init_params::<f64>(k);
        jitter(&mut p, 50 + k, 0.2);
        let xs: Vec<LatentSequence> = (0..3).map(|i| data.examples[(k * 3 + i) as usize].latent.clone()).collect();
        let refs: Vec<&LatentSequence> = xs.iter().collect();
        let masks: Vec<PromptMask> = xs.iter().enumerate().map(|(i, x)| PromptMask::new(x.frames(), i % 2).unwrap()).collect();
        let tokens = (0..3).map(|i| Some(data.examples[(k * 3 + i) as usize].tokens.clone())).collect();
        let draw = draw_diffusion::<f64, _>(&refs, &masks, tokens, &schedule, &mut ChaCha8Rng::seed_from_u64(k)).unwrap();
        out.push(("diffusion", loss_grad_error(&p, |t, b| diffusion_loss(&net, t, b, &draw))));
    }

    for k in 0..INSTANCES {
        let mut dp = disc.init_params::<f64>(k);
        jitter(&mut dp, 60 + k, 0.2);
        let mut r = ChaCha8Rng::seed_from_u64(70 + k);
        let batch = DitBatch::new(&[3, 2], &[1, 0], vec![Some(vec![1, 2]), Some(vec![0, 3, 1])], vec![0.3, 0.8]).unwrap();
        let fdim = net.feature_dim();
        let ff: Vec<f64> = (0..5 * fdim).map(|_| r.random_range(-1.0..1.0)).collect();
        let fr: Vec<f64> = (0..5 * fdim).map(|_| r.random_range(-1.0..1.0)).collect();
        out.push((
            "lsgan generator",
            loss_grad_error(&dp, |t, b| {
                let f = t.constant(5, fdim, ff.clone());
                let d = disc.forward(t, b, f, &batch)?;
                Ok(lsgan_generator(t, d))
            }),
        ));
        out.push((
            "lsgan discriminator",
            loss_grad_error(&dp, |t, b| {
                let f = t.constant(5, fdim, ff.clone());
                let g = t.constant(5, fdim, fr.clone());
                let d_fake = disc.forward(t, b, f, &batch)?;
                let d_real = disc.forward(t, b, g, &batch)?;
                Ok(lsgan_discriminator(t, d_fake, d_real))
            }),
        ));
    }

    let asr_cfg = AsrConfig { dim: 8, ff_dim: 8, heads: 2, layers: 1, ..Default::default() };
    let asr = LatentAsr::new(asr_cfg, tc.vocab_size, tc.latent_dim).unwrap();
    let sv_cfg = SvConfig { dim: 8, ff_dim: 8, heads: 2, layers: 1, embed_dim: 4, ..Default::default() };
    let sv = LatentSv::new(sv_cfg, tc.latent_dim, tc.num_speakers).unwrap();
    for k in 0..INSTANCES {
        let exs = &data.examples[(k * 2) as usize..(k * 2 + 2) as usize];
        let seqs: Vec<&LatentSequence> = exs.iter().map(|e| &e.latent).collect();
        let (x, seg) = distill_lab::latent::pack::<f64>(&seqs);
        let targets: Vec<Vec<usize>> = exs.iter().map(|e| e.tokens.clone()).collect();
        let mut ap = asr.init_params::<f64>(k);
        jitter(&mut ap, 80 + k, 0.1);
        out.push((
            "ctc",
            loss_grad_error(&ap, |t, b| {
                let xv = t.constant(seg.total(), tc.latent_dim, x.clone());
                asr.ctc_batch_loss(t, b, xv, &seg, &targets)
            }),
        ));
        let mut sp = sv.init_params::<f64>(k);
        jitter(&mut sp, 90 + k, 0.1);
        let other: Vec<&LatentSequence> = data.examples[10 + k as usize..12 + k as usize].iter().map(|e| &e.latent).collect();
        let (y, yseg) = distill_lab::latent::pack::<f64>(&other);
        out.push((
            "speaker",
            loss_grad_error(&sp, |t, b| {
                let xv = t.constant(seg.total(), tc.latent_dim, x.clone());
                let yv = t.constant(yseg.total(), tc.latent_dim, y.clone());
                let ex = sv.embed(t, b, xv, &seg)?;
                let ey = sv.embed(t, b, yv, &yseg)?;
                Ok(sv_loss(t, ex, ey))
            }),
        ));
    }

    let mut teacher = net.init_params::<f64>(11);
    jitter(&mut teacher, 12, 0.2);
    let cfg = DistillConfig::default();
    let d = Distiller { cfg: &cfg, net: &net, disc: &disc, schedule, teacher: &teacher, asr: None, sv: None };
    for k in 0..INSTANCES {
        let batch = prompted_batch(&data, 100 + k, 2);
        let mut r = ChaCha8Rng::seed_from_u64(k);
        let (x_in, t) = d.simulate_student_input(&teacher, &batch, &mut r).unwrap();
        let mut gen = teacher.clone();
        jitter(&mut gen, 110 + k, 0.05);
        let x0 = d.generate(&gen, &batch, &x_in, &t).unwrap();
        let eps = rng::gaussian_vec(&mut r, batch.numel());
        let mut score = teacher.clone();
        jitter(&mut score, 120 + k, 0.05);
        let delta = d.dmd_generator_grad(&score, &batch, &x0, &[0.4, 0.7], &eps).unwrap();
        let n = delta.len() as f64;
        out.push((
            "dmd surrogate",
            loss_grad_error(&gen, |tape, b| {
                let x = d.generator_x0(tape, b, &batch, &x_in, &t)?;
                let (rows, cols) = tape.shape(x);
                let c = tape.constant(rows, cols, delta.iter().map(|v| v / n).collect());
                let m = tape.mul(x, c);
                Ok(tape.sum(m))
            }),
        ));
    }
    out
}

fn prompted_batch(data: &Dataset, seed: u64, n: usize) -> GenBatch {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let b = GenBatch::draw(data, n, &mut r).unwrap();
        if b.prompts.iter().zip(&b.lengths).all(|(&p, &l)| p > 0 && p < l) {
            return b;
        }
    }
}

pub fn gradient_integrity() -> Verdict {
    let mut worst = ("", 0.0f64);
    let mut failures = Vec::new();
    let mut checks = 0;
    for (name, cases, scale, build) in primitives() {
        assert!(cases.len() as u64 >= INSTANCES);
        for (i, shapes) in cases.iter().enumerate() {
            let e = primitive_error(shapes, scale, 1000 + i as u64, build.as_ref());
            checks += 1;
            if e > worst.1 {
                worst = (name, e);
            }
            if !(e <= GRAD_TOL) {
                failures.push(format!("{name}[{i}] {e:.1e}"));
            }
        }
    }
    for (name, e) in loss_errors() {
        checks += 1;
        if e > worst.1 {
            worst = (name, e);
        }
        if !(e <= GRAD_TOL) {
            failures.push(format!("{name} {e:.1e}"));
        }
    }
    let detail = format!("{checks} checks, worst relative error {:.2e} ({})", worst.1, worst.0);
    if failures.is_empty() {
        Verdict::pass(detail)
    } else {
        Verdict::fail(format!("{detail}; over tolerance: {}", failures.join(", ")))
    }
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

fn enumerate_nll(logits: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
    let lp: Vec<f64> = logits
        .chunks(v)
        .flat_map(|row| {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            row.iter().map(move |x| x - lse)
        })
        .collect();
    let mut terms = Vec::new();
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % v;
            c /= v;
        }
        if collapse(&path) == target {
            terms.push(path.iter().enumerate().map(|(i, &s)| lp[i * v + s]).sum::<f64>());
        }
    }
    if terms.is_empty() {
        return f64::INFINITY;
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    -(m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<usize>> = frontier
            .iter()
            .flat_map(|p| (1..v).map(move |s| p.iter().copied().chain([s]).collect()))
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn ctc_oracle() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (mut checked, mut infeasible, mut worst) = (0, 0, 0.0f64);
    for v in 2..=4 {
        for t in 1..=6 {
            for target in all_targets(v, 3) {
                let logits: Vec<f64> = (0..t * v).map(|_| r.random_range(-3.0..3.0)).collect();
                let want = enumerate_nll(&logits, t, v, &target);
                if t < min_frames(&target) {
                    if want.is_finite() || ctc_loss(&logits, t, v, &target).is_ok() {
                        return Verdict::fail(format!("T={t} V={v} {target:?}: infeasible target not rejected"));
                    }
                    infeasible += 1;
                    continue;
                }
                let got = match ctc_loss(&logits, t, v, &target) {
                    Ok(g) => g,
                    Err(e) => return Verdict::fail(format!("T={t} V={v} {target:?}: {e}")),
                };
                let err = (got - want).abs();
                worst = worst.max(err);
                if !(err <= 1e-9) {
                    return Verdict::fail(format!("T={t} V={v} {target:?}: {got} vs enumeration {want}"));
                }
                checked += 1;
            }
        }
    }
    Verdict::pass(format!("{checked} (T, V, target) cases agree, max |diff| {worst:.1e}; {infeasible} infeasible cases rejected"))
}

pub fn schedule_identities() -> Verdict {
    let grid: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
    let mut worst_norm = 0.0f64;
    for shift in [0.25, 0.5, 1.0] {
        let p = ScheduleParams::new(shift).unwrap();
        for &t in &grid {
            let ab = shifted_alpha_sigma(t, &p).unwrap();
            worst_norm = worst_norm.max((ab.alpha * ab.alpha + ab.sigma * ab.sigma - 1.0).abs());
        }
    }
    let unit = ScheduleParams::new(1.0).unwrap();
    let mut worst_base = 0.0f64;
    for &t in &grid {
        let a = shifted_alpha_sigma(t, &unit).unwrap();
        let b = base_alpha_sigma(t).unwrap();
        worst_base = worst_base.max((a.alpha - b.alpha).abs()).max((a.sigma - b.sigma).abs());
    }
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut worst_trip = 0.0f64;
    for shift in [0.25, 0.5, 1.0] {
        let p = ScheduleParams::new(shift).unwrap();
        for k in 0..200 {
            let t = (k as f64 + 0.5) / 200.0;
            let frames = r.random_range(1..6);
            let x0 = LatentSequence::new(frames, 4, (0..frames * 4).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
            let eps = LatentSequence::new(frames, 4, rng::gaussian_vec(&mut r, frames * 4)).unwrap();
            let xt = diffuse(&x0, &eps, t, &p).unwrap();
            let v = velocity(&x0, &eps, t, &p).unwrap();
            let x0b = recover_x0(&xt, &v, t, &p).unwrap();
            let epsb = recover_eps(&xt, &v, t, &p).unwrap();
            for (a, b) in x0.data().iter().zip(x0b.data()).chain(eps.data().iter().zip(epsb.data())) {
                worst_trip = worst_trip.max((a - b).abs());
            }
        }
    }
    let detail = format!("|a²+s²-1| ≤ {worst_norm:.1e}, |shift 1 - base| ≤ {worst_base:.1e}, v round trip ≤ {worst_trip:.1e}");
    if worst_norm <= 1e-12 && worst_base <= 1e-12 && worst_trip <= 1e-9 {
        Verdict::pass(detail)
    } else {
        Verdict::fail(detail)
    }
}

pub fn dmd_fixed_point() -> Verdict {
    let task = SyntheticTask::new(tiny_task()).unwrap();
    let tc = task.config().clone();
    let data = fixture_data(&task, 48);
    let net = DitNet::new(tiny_net(), tc.vocab_size, tc.latent_dim).unwrap();
    let disc = Discriminator::new(tiny_net(), tc.vocab_size).unwrap();
    let mut teacher = net.init_params::<f64>(21);
    jitter(&mut teacher, 22, 0.2);
    let cfg = DistillConfig { guidance: 0.0, lambda_ctc: 0.0, lambda_sv: 0.0, ..Default::default() };
    let d = Distiller { cfg: &cfg, net: &net, disc: &disc, schedule: ScheduleParams::default(), teacher: &teacher, asr: None, sv: None };
    let (lo, hi) = cfg.dmd_t_range;
    let mut nonzero = 0usize;
    let mut elements = 0usize;
    for k in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(300 + k);
        let n = r.random_range(1..5);
        let batch = GenBatch::draw(&data, n, &mut r).unwrap();
        let mut gen = teacher.clone();
        jitter(&mut gen, 400 + k, 0.1);
        let (x_in, t) = d.simulate_student_input(&gen, &batch, &mut r).unwrap();
        let x0 = d.generate(&gen, &batch, &x_in, &t).unwrap();
        let times: Vec<f64> = (0..n).map(|_| r.random_range(lo..=hi)).collect();
        let eps = rng::gaussian_vec(&mut r, batch.numel());
        let delta = d.dmd_generator_grad(&teacher, &batch, &x0, &times, &eps).unwrap();
        elements += delta.len();
        nonzero += delta.iter().filter(|&&v| v != 0.0).count();
        let (_, g) = try_value_and_grad::<f64, LabError, _>(&gen, |tape, b| {
            let x = d.generator_x0(tape, b, &batch, &x_in, &t)?;
            let (rows, cols) = tape.shape(x);
            let c = tape.constant(rows, cols, delta.clone());
            let m = tape.mul(x, c);
            Ok(tape.sum(m))
        })
        .unwrap();
        nonzero += g.iter().flat_map(|(_, a)| a.data().iter()).filter(|&&v| v != 0.0).count();
    }
    let detail = format!("100 batches, {elements} latent elements, {nonzero} non-zero gradient entries");
    if nonzero == 0 {
        Verdict::pass(detail)
    } else {
        Verdict::fail(detail)
    }
}

pub fn sampler_fidelity() -> Verdict {
    let grid = StudentTimeGrid::default();
    if grid.times() != [1.0, 0.75, 0.5, 0.25] {
        return Verdict::fail(format!("default grid is {:?}", grid.times()));
    }
    let task = SyntheticTask::new(tiny_task()).unwrap();
    let tc = task.config().clone();
    let net = DitNet::new(tiny_net(), tc.vocab_size, tc.latent_dim).unwrap();
    let schedule = ScheduleParams::default();
    let (mut traces, mut violations) = (0usize, 0usize);
    for k in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(500 + k);
        let mut gen = net.init_params::<f64>(k);
        jitter(&mut gen, 600 + k, 0.3);
        let n = r.random_range(1..5);
        let reqs: Vec<SampleRequest> = (0..n)
            .map(|i| {
                let ex = task.example("eval", k * 8 + i).unwrap();
                let frames = ex.latent.frames();
                let p = r.random_range(1..frames.max(2)).min(frames);
                SampleRequest {
                    tokens: ex.tokens.clone(),
                    prompt: Some(ex.latent.slice_frames(0, p).unwrap()),
                    total_frames: p + r.random_range(1..4),
                    seed: r.random(),
                }
            })
            .collect();
        let mut observe = |s: &StepTrace<'_>| {
            traces += 1;
            for (q, (xt, x0)) in reqs.iter().zip(s.x_t.iter().zip(s.x0)) {
                let pd = q.prompt.as_ref().unwrap().data();
                if xt.data()[..pd.len()] != *pd || x0.data()[..pd.len()] != *pd {
                    violations += 1;
                }
            }
        };
        let (out, evals) = multi_step_sample(&net, &gen, &reqs, &grid, &schedule, Some(&mut observe)).unwrap();
        if evals != grid.len() as u64 {
            return Verdict::fail(format!("run {k}: {evals} evaluations"));
        }
        for (q, x) in reqs.iter().zip(&out) {
            let pd = q.prompt.as_ref().unwrap().data();
            if x.data()[..pd.len()] != *pd {
                violations += 1;
            }
        }
    }
    let detail = format!("100 runs, {traces} intermediate steps, {violations} prompt mismatches; grid {:?}", grid.times());
    if violations == 0 && traces == 400 {
        Verdict::pass(detail)
    } else {
        Verdict::fail(detail)
    }
}
