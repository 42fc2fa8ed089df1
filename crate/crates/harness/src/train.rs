//! The training loop. Every step draws its batch from a per-epoch shuffle
//! and its randomness from a ChaCha stream keyed by the step index, so a run
//! resumed from a checkpoint replays the uninterrupted run exactly.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use apg_core::diff::Init;
use apg_core::dmm::{Decoder, DmmHyper, DmmInstance, DmmNets};
use apg_core::gmm::{GmmHyper, GmmInstance, GmmNets};
use apg_core::train::{dmm_step, gmm_mean_kl, gmm_step, Schedule, StepReport};
use apg_core::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{stem_for, Checkpoint};
use crate::config::{ExperimentConfig, Method};
use crate::corpus::{self, Corpus};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricRow, MetricWriter};

pub const FROZEN_CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.csv";
pub const ABORT: &str = "abort.json";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
}

/// Instance order for training: epoch `e` visits a ChaCha shuffle of the
/// corpus keyed by `(seed, e)`.
struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
}

impl BatchOrder {
    fn new(seed: u64, n: usize) -> Self {
        let mut s = Self { seed, n, epoch: u64::MAX, perm: Vec::new() };
        s.load(0);
        s
    }

    fn load(&mut self, epoch: u64) {
        if epoch == self.epoch {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_ba7c);
        rng.set_stream(epoch);
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut rng);
        self.epoch = epoch;
    }

    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        (0..size as u64)
            .map(|j| {
                let pos = step * size as u64 + j;
                self.load(pos / self.n as u64);
                self.perm[(pos % self.n as u64) as usize]
            })
            .collect()
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

enum Learner {
    Gmm { hyper: GmmHyper, nets: GmmNets, instances: Vec<GmmInstance>, phi: ParamStore },
    Dmm { hyper: DmmHyper, nets: DmmNets, decoder: Decoder, instances: Vec<DmmInstance>, phi: ParamStore, theta: ParamStore },
}

impl Learner {
    fn len(&self) -> usize {
        match self {
            Learner::Gmm { instances, .. } => instances.len(),
            Learner::Dmm { instances, .. } => instances.len(),
        }
    }

    fn step(&mut self, idx: &[usize], schedule: Schedule, rng: &mut ChaCha8Rng) -> apg_core::Result<StepReport> {
        match self {
            Learner::Gmm { hyper, nets, instances, phi } => {
                let batch: Vec<&GmmInstance> = idx.iter().map(|&i| &instances[i]).collect();
                gmm_step(phi, nets, hyper, &batch, schedule, rng)
            }
            Learner::Dmm { hyper, nets, decoder, instances, phi, theta } => {
                let batch: Vec<&DmmInstance> = idx.iter().map(|&i| &instances[i]).collect();
                dmm_step(phi, theta, nets, decoder, hyper, &batch, schedule, rng)
            }
        }
    }

    fn kl(&self, count: usize) -> Result<(Option<f64>, Option<f64>)> {
        match self {
            Learner::Gmm { hyper, nets, instances, phi } if count > 0 => {
                let (g, l) = gmm_mean_kl(phi, nets, hyper, &instances[..count.min(instances.len())])?;
                Ok((Some(g), Some(l)))
            }
            _ => Ok((None, None)),
        }
    }

    fn checkpoint(&self, cfg: &ExperimentConfig, step: u64) -> Checkpoint {
        let (hyper, phi, theta) = match self {
            Learner::Gmm { hyper, phi, .. } => (json!(hyper), phi.clone(), None),
            Learner::Dmm { hyper, phi, theta, .. } => (json!(hyper), phi.clone(), Some(theta.clone())),
        };
        Checkpoint { model: cfg.model, step, hyper, config: cfg.clone(), phi, theta }
    }

    fn params_finite(&self) -> bool {
        let ok = |s: &ParamStore| s.flat_values().iter().all(|v| v.is_finite());
        match self {
            Learner::Gmm { phi, .. } => ok(phi),
            Learner::Dmm { phi, theta, .. } => ok(phi) && ok(theta),
        }
    }
}

fn learner(cfg: &ExperimentConfig, corpus: Corpus) -> Result<(Learner, u64)> {
    if corpus.model() != cfg.model {
        return Err(HarnessError::Config(format!("{}: corpus model does not match the config", cfg.train_corpus.display())));
    }
    if corpus.is_empty() {
        return Err(HarnessError::Config("training corpus is empty".into()));
    }
    let resumed = cfg.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        if ck.model != cfg.model {
            return Err(HarnessError::Config("resume checkpoint is for a different model".into()));
        }
    }
    let mut rng = step_rng(cfg.seed, u64::MAX - 1);
    let start = resumed.as_ref().map_or(0, |c| c.step);
    let learner = match corpus {
        Corpus::Gmm { hyper, instances } => {
            let nets = GmmNets::new(hyper.m)?;
            let phi = match resumed {
                Some(ck) => ck.phi,
                None => {
                    let mut phi = ParamStore::new();
                    nets.init(&mut phi, &mut rng)?;
                    phi
                }
            };
            Learner::Gmm { hyper, nets, instances, phi }
        }
        Corpus::Dmm { hyper, instances } => {
            let nets = DmmNets::new(hyper.m)?;
            let decoder = Decoder::new();
            let (phi, theta) = match resumed {
                Some(ck) => (ck.phi, ck.theta.ok_or_else(|| HarnessError::Config("DMM checkpoint lacks decoder parameters".into()))?),
                None => {
                    let (mut phi, mut theta) = (ParamStore::new(), ParamStore::new());
                    nets.init(&mut phi, &mut rng)?;
                    decoder.init(&mut theta, Init::Xavier, &mut rng)?;
                    (phi, theta)
                }
            };
            Learner::Dmm { hyper, nets, decoder, instances, phi, theta }
        }
    };
    Ok((learner, start))
}

/// Trains per `cfg`, writing the frozen config, metric rows, and checkpoints
/// into `cfg.out_dir`. A fresh run checkpoints its initialization; with
/// `steps = 0` that is the only checkpoint written.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = match cfg.method {
        Method::Apg => Schedule { sweeps: cfg.sweeps, particles: cfg.particles, lr: cfg.lr },
        Method::Rws => Schedule { sweeps: 1, particles: cfg.sweeps * cfg.particles, lr: cfg.lr },
        other => return Err(HarnessError::Config(format!("method `{}` has no training objective", other.name()))),
    };
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(FROZEN_CONFIG), cfg.to_toml())?;
    let (mut learner, start) = learner(cfg, corpus::read(&cfg.train_corpus)?)?;
    let steps = cfg.steps as u64;
    if start > steps {
        return Err(HarnessError::Config(format!("checkpoint is at step {start}, past the {steps} requested")));
    }
    let mut order = BatchOrder::new(cfg.seed, learner.len());
    let mut writer = MetricWriter::append(&cfg.out_dir.join(METRICS))?;
    let clock = Instant::now();
    let mut last = stem_for(&cfg.out_dir, start);
    if cfg.resume.is_none() {
        learner.checkpoint(cfg, 0).save(&last)?;
    }
    for step in start..steps {
        let idx = order.batch(step, cfg.batch);
        let mut rng = step_rng(cfg.seed, step);
        let report = learner.step(&idx, schedule, &mut rng).map_err(HarnessError::from).and_then(|r| {
            if r.log_joint.is_finite() && learner.params_finite() {
                Ok(r)
            } else {
                Err(HarnessError::Numeric(format!("non-finite loss or parameters (log-joint {})", r.log_joint)))
            }
        });
        let report = match report {
            Ok(r) => r,
            Err(e @ HarnessError::Numeric(_)) => {
                let dump = json!({ "step": step, "batch": idx, "error": e.to_string(), "seed": cfg.seed });
                fs::write(cfg.out_dir.join(ABORT), serde_json::to_string_pretty(&dump)?)?;
                writer.flush()?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = step + 1;
        if cfg.log_every > 0 && done % cfg.log_every as u64 == 0 {
            let (kl_global, kl_local) = learner.kl(cfg.kl_instances)?;
            writer.write(&MetricRow {
                method: cfg.method.name().into(),
                seed: cfg.seed,
                step: Some(done),
                instance: None,
                sweeps: schedule.sweeps,
                particles: schedule.particles,
                lf: None,
                sweep: schedule.sweeps,
                log_joint: report.log_joint,
                ess_l: report.ess_fraction,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
                log_joint_evals: cfg.budget(),
                kl_global,
                kl_local,
                recon_mse: None,
            })?;
            writer.flush()?;
        }
        if done == steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0) {
            last = stem_for(&cfg.out_dir, done);
            learner.checkpoint(cfg, done).save(&last)?;
        }
    }
    writer.flush()?;
    Ok(TrainOutcome { final_checkpoint: last, steps })
}
