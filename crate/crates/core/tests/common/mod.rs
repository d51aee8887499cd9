//! Tiny fixtures shared by the integration tests.
#![allow(dead_code)]

use distill_lab::auxmodels::{AsrConfig, LatentAsr, LatentSv, SvConfig};
use distill_lab::distill::{DistillConfig, Distiller, GenBatch};
use distill_lab::nets::{DitNet, Discriminator, NetConfig};
use distill_lab::schedule::ScheduleParams;
use distill_lab::synthtask::{Dataset, SyntheticTask, TaskConfig};
use distill_lab::train::OptimConfig;
use distill_substrate::ParameterStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_net() -> NetConfig {
    NetConfig {
        model_dim: 8,
        ff_dim: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        cond_dropout: 0.1,
        disc_dim: 8,
        disc_layers: 1,
    }
}

pub fn tiny_task() -> TaskConfig {
    TaskConfig {
        vocab_size: 4,
        latent_dim: 3,
        num_speakers: 4,
        rate_range: (1, 2),
        tokens_range: (2, 3),
        ..Default::default()
    }
}

pub fn jitter(p: &mut ParameterStore<f64>, seed: u64, scale: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (_, a) in p.iter_mut() {
        for v in a.data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
}

/// Untrained tiny networks over a tiny task; weights are jittered so every
/// path carries signal.
pub struct Fixture {
    pub task: SyntheticTask,
    pub data: Dataset,
    pub net: DitNet,
    pub disc: Discriminator,
    pub teacher: ParameterStore<f64>,
    pub asr: LatentAsr,
    pub asr_params: ParameterStore<f64>,
    pub sv: LatentSv,
    pub sv_params: ParameterStore<f64>,
    pub schedule: ScheduleParams,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let task = SyntheticTask::new(tiny_task()).unwrap();
        let data = task.dataset("train", 24).unwrap();
        let tc = task.config();
        let net = DitNet::new(tiny_net(), tc.vocab_size, tc.latent_dim).unwrap();
        let disc = Discriminator::new(tiny_net(), tc.vocab_size).unwrap();
        let mut teacher = net.init_params::<f64>(seed);
        jitter(&mut teacher, seed + 1, 0.2);
        let small = |o: OptimConfig| OptimConfig { steps: 10, batch: 4, ..o };
        let asr_cfg = AsrConfig { dim: 8, ff_dim: 8, heads: 2, layers: 1, ..Default::default() };
        let asr_cfg = AsrConfig { optim: small(asr_cfg.optim.clone()), ..asr_cfg };
        let asr = LatentAsr::new(asr_cfg, tc.vocab_size, tc.latent_dim).unwrap();
        let asr_params = asr.init_params(seed + 2);
        let sv_cfg = SvConfig { dim: 8, ff_dim: 8, heads: 2, layers: 1, embed_dim: 4, ..Default::default() };
        let sv_cfg = SvConfig { optim: small(sv_cfg.optim.clone()), ..sv_cfg };
        let sv = LatentSv::new(sv_cfg, tc.latent_dim, tc.num_speakers).unwrap();
        let sv_params = sv.init_params(seed + 3);
        Self { task, data, net, disc, teacher, asr, asr_params, sv, sv_params, schedule: ScheduleParams::default() }
    }

    pub fn config(&self) -> DistillConfig {
        DistillConfig {
            optim: OptimConfig { steps: 4, batch: 3, lr_peak: 1e-3, lr_final: 1e-3, warmup_frac: 0.0, ..Default::default() },
            ctc_warmup_steps: 2,
            sv_warmup_steps: 3,
            ..Default::default()
        }
    }

    pub fn distiller<'a>(&'a self, cfg: &'a DistillConfig) -> Distiller<'a, f64> {
        Distiller {
            cfg,
            net: &self.net,
            disc: &self.disc,
            schedule: self.schedule,
            teacher: &self.teacher,
            asr: Some((&self.asr, &self.asr_params)),
            sv: Some((&self.sv, &self.sv_params)),
        }
    }

    /// A batch in which every sample has a prompt and a generated region.
    pub fn batch(&self, seed: u64, n: usize) -> GenBatch {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let b = GenBatch::draw(&self.data, n, &mut r).unwrap();
            if b.prompts.iter().zip(&b.lengths).all(|(&p, &l)| p > 0 && p < l) {
                return b;
            }
        }
    }
}
