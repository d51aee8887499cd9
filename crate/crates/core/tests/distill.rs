mod common;

use common::Fixture;
use distill_lab::distill::{dmd_delta, lsgan_discriminator, lsgan_generator, multi_step_sample, DistillConfig};
use distill_lab::rng;
use distill_lab::sampling::SampleRequest;
use distill_lab::schedule::StudentTimeGrid;
use distill_lab::LabError;
use distill_substrate::gradcheck::{numeric_grad, store_relative_error};
use distill_substrate::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn delta_matches_hand_evaluation() {
    let d = dmd_delta(&[1.0], &[0.5], &[0.8], &[1], 1).unwrap();
    assert!((d[0] - 0.6).abs() < 1e-15);
    // the normalizer is per sample
    let d = dmd_delta(&[1.0, 1.0, 2.0, 2.0], &[0.5, 0.5, 1.0, 3.0], &[0.8, 0.5, 1.0, 2.0], &[1, 1], 2).unwrap();
    assert!((d[0] - 0.6).abs() < 1e-15 && d[1] == 0.0);
    assert!((d[2] - 0.0).abs() < 1e-15 && (d[3] + 1.0).abs() < 1e-15);
}

#[test]
fn delta_vanishes_for_matched_or_satisfied_estimates() {
    let x = [0.3, -1.2, 2.0, 0.7];
    let real = [0.1, -1.0, 1.5, 0.2];
    assert!(dmd_delta(&x, &real, &real, &[2], 2).unwrap().iter().all(|&d| d == 0.0));
    let d = dmd_delta(&x, &x, &[9.0, 9.0, 9.0, 9.0], &[2], 2).unwrap();
    assert!(d.iter().all(|&d| d == 0.0));
    assert!(dmd_delta(&x, &real, &real, &[3], 2).is_err());
}

#[test]
fn identical_score_networks_give_no_update() {
    let fx = Fixture::new(1);
    let cfg = DistillConfig { guidance: 0.0, ..fx.config() };
    let d = fx.distiller(&cfg);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for k in 0..5 {
        let batch = fx.batch(k, 3);
        let (x_in, t) = d.simulate_student_input(&fx.teacher, &batch, &mut r).unwrap();
        let x0 = d.generate(&fx.teacher, &batch, &x_in, &t).unwrap();
        let times = vec![0.02 + 0.96 * (k as f64 / 4.0); batch.len()];
        let eps = rng::gaussian_vec(&mut r, batch.numel());
        let delta = d.dmd_generator_grad(&fx.teacher, &batch, &x0, &times, &eps).unwrap();
        assert!(delta.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn dmd_time_outside_range_is_rejected() {
    let fx = Fixture::new(1);
    let cfg = fx.config();
    let d = fx.distiller(&cfg);
    let batch = fx.batch(0, 2);
    let x0 = batch.clean.clone();
    let eps = vec![0.0; batch.numel()];
    assert!(d.dmd_generator_grad(&fx.teacher, &batch, &x0, &[0.5, 0.99], &eps).is_err());
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let fx = Fixture::new(2);
    let cfg = fx.config();
    let d = fx.distiller(&cfg);
    for k in 0..3 {
        let batch = fx.batch(10 + k, 2);
        let mut r = ChaCha8Rng::seed_from_u64(k);
        let (x_in, t) = d.simulate_student_input(&fx.teacher, &batch, &mut r).unwrap();
        let mut gen = fx.teacher.clone();
        common::jitter(&mut gen, 100 + k, 0.05);
        let x0 = d.generate(&gen, &batch, &x_in, &t).unwrap();
        let eps = rng::gaussian_vec(&mut r, batch.numel());
        let delta = d.dmd_generator_grad(&fx.teacher, &batch, &x0, &[0.4, 0.7], &eps).unwrap();
        assert!(delta.iter().any(|&v| v != 0.0));
        let surrogate = |p: &distill_substrate::ParameterStore<f64>| {
            let x0 = d.generate(p, &batch, &x_in, &t).unwrap();
            x0.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, analytic) = distill_substrate::try_value_and_grad::<f64, LabError, _>(&gen, |tape, p| {
            let x = d.generator_x0(tape, p, &batch, &x_in, &t)?;
            let (rows, cols) = tape.shape(x);
            let c = tape.constant(rows, cols, delta.clone());
            let m = tape.mul(x, c);
            Ok(tape.sum(m))
        })
        .unwrap();
        let numeric = numeric_grad(&gen, 1e-6, surrogate);
        let err = store_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "instance {k}: relative error {err}");
    }
}

#[test]
fn lsgan_losses_match_substitution() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(4, 1, vec![1.0; 4]);
    let halves = tape.constant(4, 1, vec![0.5; 4]);
    let zeros = tape.constant(4, 1, vec![0.0; 4]);
    let g1 = lsgan_generator(&mut tape, ones);
    let g2 = lsgan_generator(&mut tape, halves);
    let d1 = lsgan_discriminator(&mut tape, zeros, ones);
    let d2 = lsgan_discriminator(&mut tape, halves, halves);
    assert_eq!(tape.scalar(g1), 0.0);
    assert!((tape.scalar(g2) - 0.25).abs() < 1e-15);
    assert_eq!(tape.scalar(d1), 0.0);
    assert!((tape.scalar(d2) - 0.5).abs() < 1e-15);
}

#[test]
fn adversarial_gradients_reach_only_their_owner() {
    let fx = Fixture::new(3);
    let cfg = fx.config();
    let d = fx.distiller(&cfg);
    let batch = fx.batch(3, 3);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (x_in, t) = d.simulate_student_input(&fx.teacher, &batch, &mut r).unwrap();
    let t_adv = vec![0.3, 0.5, 0.8];
    let eps = rng::gaussian_vec(&mut r, batch.numel());
    let disc = fx.disc.init_params::<f64>(9);

    // generator loss: the generator receives gradient
    let mut tape = Tape::new();
    let gp = tape.bind(&fx.teacher, true);
    let x0 = d.generator_x0(&mut tape, &gp, &batch, &x_in, &t).unwrap();
    let loss = d.gen_adv_loss(&mut tape, &fx.teacher, &disc, &batch, x0, &t_adv, &eps).unwrap();
    let g = gp.collect(&tape.backward(loss).unwrap());
    assert!(g.global_norm() > 0.0);

    // discriminator loss: generator and score network receive nothing
    let mut tape = Tape::new();
    let gp = tape.bind(&fx.teacher, true);
    let dp = tape.bind(&disc, true);
    let fake = d.generator_x0(&mut tape, &gp, &batch, &x_in, &t).unwrap();
    let (rows, cols) = tape.shape(fake);
    let real = tape.constant(rows, cols, batch.clean.clone());
    let loss = d.disc_loss(&mut tape, &fx.teacher, &dp, &batch, fake, real, &t_adv, &eps, &eps).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(gp.collect(&grads).global_norm(), 0.0);
    assert!(dp.collect(&grads).global_norm() > 0.0);
}

#[test]
fn score_loss_does_not_reach_the_generator() {
    let fx = Fixture::new(4);
    let cfg = fx.config();
    let d = fx.distiller(&cfg);
    let batch = fx.batch(4, 3);
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (x_in, t) = d.simulate_student_input(&fx.teacher, &batch, &mut r).unwrap();
    let mut tape = Tape::new();
    let gp = tape.bind(&fx.teacher, true);
    let sp = tape.bind(&fx.teacher, true);
    let x0 = d.generator_x0(&mut tape, &gp, &batch, &x_in, &t).unwrap();
    let loss = d.score_loss(&mut tape, &sp, &batch, x0, &mut r).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(gp.collect(&grads).iter().all(|(_, a)| a.data().iter().all(|&v| v == 0.0)));
    assert!(sp.collect(&grads).global_norm() > 0.0);
}

#[test]
fn first_grid_input_is_pure_noise() {
    let fx = Fixture::new(5);
    let cfg = fx.config();
    let d = fx.distiller(&cfg);
    let batch = fx.batch(5, 3);
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let (x, t) = d.simulate_student_input_at(&fx.teacher, &batch, &[1, 1, 1], &mut r).unwrap();
    assert_eq!(t, vec![1.0; 3]);
    let eps = rng::gaussian_vec(&mut ChaCha8Rng::seed_from_u64(77), batch.numel());
    let mut expected = eps.clone();
    batch.apply_prompt(&mut expected);
    assert_eq!(x, expected);
}

#[test]
fn later_grid_inputs_are_renoised_generator_outputs() {
    let fx = Fixture::new(6);
    let cfg = fx.config();
    let d = fx.distiller(&cfg);
    let batch = fx.batch(6, 3);
    let (x, t) = d
        .simulate_student_input_at(&fx.teacher, &batch, &[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_eq!(t, vec![0.75, 0.5, 0.25]);
    let mut with_prompt = x.clone();
    batch.apply_prompt(&mut with_prompt);
    assert_eq!(x, with_prompt);
    assert!(d.simulate_student_input_at(&fx.teacher, &batch, &[0, 1, 2], &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    assert!(d.simulate_student_input_at(&fx.teacher, &batch, &[5, 1, 2], &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    let grid = StudentTimeGrid::default();
    let sig: Vec<f64> = grid.times().iter().map(|&t| fx.schedule.alpha_sigma(t).unwrap().sigma).collect();
    assert!(sig.windows(2).all(|w| w[1] < w[0]));
}

fn requests(fx: &Fixture, n: usize) -> Vec<SampleRequest> {
    (0..n)
        .map(|i| {
            let ex = fx.task.example("eval", i as u64).unwrap();
            let p = (ex.latent.frames() / 2).max(1);
            SampleRequest {
                tokens: ex.tokens.clone(),
                prompt: Some(ex.latent.slice_frames(0, p).unwrap()),
                total_frames: ex.latent.frames() + i % 3,
                seed: 1000 + i as u64,
            }
        })
        .collect()
}

#[test]
fn multi_step_sampler_keeps_prompt_at_every_step() {
    let fx = Fixture::new(7);
    let reqs = requests(&fx, 5);
    let grid = StudentTimeGrid::default();
    let mut seen = 0;
    let mut check = |s: &distill_lab::sampling::StepTrace<'_>| {
        seen += 1;
        for (r, (xt, x0)) in reqs.iter().zip(s.x_t.iter().zip(s.x0)) {
            let p = r.prompt.as_ref().unwrap();
            assert_eq!(&xt.data()[..p.data().len()], p.data());
            assert_eq!(&x0.data()[..p.data().len()], p.data());
        }
    };
    let (out, evals) = multi_step_sample(&fx.net, &fx.teacher, &reqs, &grid, &fx.schedule, Some(&mut check)).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(evals, 4);
    for (r, x) in reqs.iter().zip(&out) {
        let p = r.prompt.as_ref().unwrap();
        assert_eq!(&x.data()[..p.data().len()], p.data());
        assert_eq!(x.frames(), r.total_frames);
    }
    let (again, _) = multi_step_sample(&fx.net, &fx.teacher, &reqs, &grid, &fx.schedule, None).unwrap();
    assert_eq!(out, again);
}

#[test]
fn single_time_grid_is_one_generator_application() {
    let fx = Fixture::new(8);
    let reqs = requests(&fx, 3);
    let grid = StudentTimeGrid::new(vec![1.0]).unwrap();
    let (out, evals) = multi_step_sample(&fx.net, &fx.teacher, &reqs, &grid, &fx.schedule, None).unwrap();
    assert_eq!(evals, 1);
    let dim = fx.task.config().latent_dim;
    for (r, x) in reqs.iter().zip(&out) {
        let mut noise = rng::gaussian_vec(&mut rng::rng_from(r.seed), r.total_frames * dim);
        let p = r.prompt.as_ref().unwrap();
        noise[..p.data().len()].copy_from_slice(p.data());
        let batch = distill_lab::nets::DitBatch::new(&[r.total_frames], &[p.frames()], vec![Some(r.tokens.clone())], vec![1.0]).unwrap();
        let v = fx.net.predict(&fx.teacher, &batch, &noise).unwrap();
        let mut x0: Vec<f64> = v.iter().map(|v| -v).collect();
        x0[..p.data().len()].copy_from_slice(p.data());
        assert_eq!(x.data(), &x0[..]);
    }
}

#[test]
fn warmup_gating_is_exact() {
    let fx = Fixture::new(9);
    let cfg = fx.config();
    assert_eq!(cfg.weights_at(0).ctc, 0.0);
    assert_eq!(cfg.weights_at(1).sv, 0.0);
    assert_eq!(cfg.weights_at(2).ctc, 1.0);
    assert_eq!(cfg.weights_at(3).sv, 1.0);
    assert_eq!(cfg.weights_at(0).adv, 1e-3);
    let d = fx.distiller(&cfg);
    let (state, log) = d.run(&fx.data, 3).unwrap();
    let gated: Vec<(bool, bool)> = log.iter().map(|r| (r.ctc.is_some(), r.gn_sv.is_some())).collect();
    assert_eq!(gated[0], (false, false));
    assert_eq!(gated[1], (false, false));
    assert!(gated[2].0);
    assert!(gated[3].0);
    assert!(log.iter().all(|r| r.adv_gen.is_some()));
    assert_eq!(state.step, 4);
    assert_eq!(state.score_steps, 20);
    assert_ne!(state.gen, fx.teacher);
    assert_ne!(state.score, fx.teacher);
}

#[test]
fn distillation_is_deterministic() {
    let fx = Fixture::new(10);
    let cfg = DistillConfig { optim: distill_lab::train::OptimConfig { steps: 2, ..fx.config().optim }, ..fx.config() };
    let d = fx.distiller(&cfg);
    let (a, la) = d.run(&fx.data, 5).unwrap();
    let (b, lb) = d.run(&fx.data, 5).unwrap();
    assert_eq!(a.gen, b.gen);
    assert_eq!(la, lb);
}

#[test]
fn metric_terms_require_their_models() {
    let fx = Fixture::new(11);
    let cfg = fx.config();
    let mut d = fx.distiller(&cfg);
    d.asr = None;
    assert!(matches!(d.validate(), Err(LabError::Missing { .. })));
    let cfg = DistillConfig { lambda_ctc: 0.0, ..fx.config() };
    let mut d = fx.distiller(&cfg);
    d.asr = None;
    assert!(d.validate().is_ok());
}

#[test]
fn score_network_tracks_a_frozen_generator() {
    let fx = Fixture::new(12);
    let cfg = fx.config();
    let d = fx.distiller(&cfg);
    let mut state = distill_lab::distill::DistillState::from_teacher(&fx.teacher, &fx.disc, 1);
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let losses: Vec<f64> = (0..300).map(|_| d.student_score_update(&mut state, &fx.data, 3e-3, &mut r).unwrap()).collect();
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[250..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "score loss {head} -> {tail}");
    assert_eq!(state.gen, fx.teacher);
}
