//! Test-time evaluation of a checkpoint under every inference method.
//!
//! Rows are emitted after each sweep; `wall_ms` and `log_joint_evals` are
//! cumulative over the run and exclude the time spent computing metrics.
//! A sweep counts `L` evaluations whatever its number of blocks, so APG,
//! BPG and Gibbs at `K` sweeps match RWS with `K·L` particles, and an HMC
//! update counts `L·LF`.
//! Every (seed, instance) pair draws from its own ChaCha stream.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use apg_core::dmm::{self, Decoder, DmmHyper, DmmInstance, DmmModel, DmmNets};
use apg_core::estimators::{rws_grad_phi, snis_expectation};
use apg_core::gmm::{self, GmmHyper, GmmInstance, GmmModel, GmmNets};
use apg_core::hmc::{hmc_rws_trace, HmcConfig, HmcModel};
use apg_core::smc::{apg_sweep, BlockKernel, Encoder, ParticleSystem, SweepOptions};
use apg_core::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Method, ModelKind};
use crate::corpus::{self, Corpus};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricRow, MetricWriter};

#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub checkpoint: PathBuf,
    /// Defaults to the checkpoint config's test corpus.
    pub corpus: Option<PathBuf>,
    pub method: Method,
    pub sweeps: usize,
    pub particles: usize,
    /// Leapfrog steps for HMC-RWS; defaults to the checkpoint config.
    pub lf: Option<usize>,
    pub seeds: Vec<u64>,
    /// Evaluate only the first `instances` of the corpus.
    pub instances: Option<usize>,
    pub out: PathBuf,
    /// JSONL file receiving the final particle system of every run.
    pub dump_latents: Option<PathBuf>,
}

impl EvalSpec {
    fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.particles == 0 {
            return Err(HarnessError::Config("sweeps and particles must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.lf == Some(0) {
            return Err(HarnessError::Config("leapfrog steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Dump<'a, St> {
    method: &'a str,
    seed: u64,
    instance: usize,
    log_weights: &'a [f64],
    particles: &'a [St],
}

/// Accumulates algorithm time, paused while metrics are computed.
struct Stopwatch {
    total: Duration,
    since: Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self { total: Duration::ZERO, since: Instant::now() }
    }

    fn pause(&mut self) -> f64 {
        self.total += self.since.elapsed();
        self.total.as_secs_f64() * 1e3
    }

    fn resume(&mut self) {
        self.since = Instant::now();
    }
}

struct Run<'a, St> {
    method: Method,
    seed: u64,
    instance: usize,
    sweeps: usize,
    particles: usize,
    lf: Option<usize>,
    recon: Option<&'a dyn Fn(&St) -> apg_core::Result<f64>>,
    rows: Vec<MetricRow>,
}

impl<St: Clone> Run<'_, St> {
    fn emit(&mut self, system: &ParticleSystem<St>, sweep: usize, evals: usize, wall_ms: f64) -> Result<()> {
        let recon_mse = match self.recon {
            Some(f) => {
                let v: Vec<f64> = system.particles.iter().map(f).collect::<apg_core::Result<_>>()?;
                Some(snis_expectation(&system.log_weights, &v)?)
            }
            None => None,
        };
        self.rows.push(MetricRow {
            method: self.method.name().into(),
            seed: self.seed,
            step: None,
            instance: Some(self.instance),
            sweeps: self.sweeps,
            particles: self.particles,
            lf: self.lf,
            sweep,
            log_joint: system.mean_log_joint()?,
            ess_l: system.ess()? / system.len() as f64,
            wall_ms,
            log_joint_evals: evals,
            kl_global: None,
            kl_local: None,
            recon_mse,
        });
        Ok(())
    }
}

/// Importance sampling from `encoder`, then `sweeps − 1` sweeps of `kernels`.
fn run_sweeps<T: HmcModel>(
    run: &mut Run<'_, T::State>,
    target: &T,
    encoder: &dyn Encoder<T::State>,
    kernels: &[&dyn BlockKernel<T::State>],
    particles: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleSystem<T::State>> {
    let mut clock = Stopwatch::start();
    let first = rws_grad_phi(encoder, target, particles, rng, None)?;
    let mut system = ParticleSystem::new(first.states, first.log_weights, first.log_joints)?;
    let mut evals = particles;
    let ms = clock.pause();
    run.emit(&system, 1, evals, ms)?;
    for sweep in 2..=run.sweeps {
        clock.resume();
        system = apg_sweep(system, target, kernels, rng, None, SweepOptions::default())?;
        evals += particles;
        let ms = clock.pause();
        run.emit(&system, sweep, evals, ms)?;
    }
    Ok(system)
}

fn run_hmc<T: HmcModel>(
    run: &mut Run<'_, T::State>,
    target: &T,
    encoder: &dyn Encoder<T::State>,
    cfg: &HmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleSystem<T::State>> {
    let mut clock = Stopwatch::start();
    let (l, lf) = (run.particles, cfg.leapfrog_steps);
    let mut sweep = 0;
    let mut failure = None;
    let out = hmc_rws_trace(target, encoder, run.sweeps - 1, l, cfg, rng, &mut |system| {
        sweep += 1;
        let ms = clock.pause();
        let evals = l + (sweep - 1) * l * lf;
        if let Err(e) = run.emit(system, sweep, evals, ms) {
            failure = Some(e);
        }
        clock.resume();
        Ok(())
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out.system),
    }
}

/// One evaluation run of `method` on a model with neural proposals.
#[allow(clippy::too_many_arguments)]
fn dispatch<T: HmcModel>(
    run: &mut Run<'_, T::State>,
    target: &T,
    neural: (&dyn Encoder<T::State>, [&dyn BlockKernel<T::State>; 2]),
    prior: (&dyn Encoder<T::State>, [&dyn BlockKernel<T::State>; 2]),
    gibbs: Option<[&dyn BlockKernel<T::State>; 2]>,
    hmc: &HmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleSystem<T::State>> {
    let l = run.particles;
    match run.method {
        Method::Apg => run_sweeps(run, target, neural.0, &neural.1, l, rng),
        Method::Bpg => run_sweeps(run, target, prior.0, &prior.1, l, rng),
        Method::Gibbs => {
            let kernels = gibbs.ok_or_else(|| HarnessError::Config("exact Gibbs kernels exist only for the GMM".into()))?;
            run_sweeps(run, target, neural.0, &kernels, l, rng)
        }
        Method::Rws => {
            // One importance step with the whole K·L budget.
            let (k, sweeps) = (run.sweeps, run.sweeps);
            run.sweeps = 1;
            let out = run_sweeps(run, target, neural.0, &[], k * l, rng);
            run.sweeps = sweeps;
            for r in &mut run.rows {
                r.sweeps = sweeps;
            }
            out
        }
        Method::HmcRws => run_hmc(run, target, neural.0, hmc, rng),
    }
}

fn instance_rng(seed: u64, instance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance as u64);
    rng
}

struct Sinks {
    rows: Vec<MetricRow>,
    dump: Option<BufWriter<fs::File>>,
}

impl Sinks {
    fn finish<St: Clone + Serialize>(&mut self, run: Run<'_, St>, system: &ParticleSystem<St>) -> Result<()> {
        if let Some(out) = self.dump.as_mut() {
            let d = Dump {
                method: run.method.name(),
                seed: run.seed,
                instance: run.instance,
                log_weights: &system.log_weights,
                particles: &system.particles,
            };
            serde_json::to_writer(&mut *out, &d)?;
            out.write_all(b"\n")?;
        }
        self.rows.extend(run.rows);
        Ok(())
    }
}

fn eval_gmm(
    spec: &EvalSpec,
    phi: &ParamStore,
    hyper: &GmmHyper,
    instances: &[GmmInstance],
    hmc: &HmcConfig,
    sinks: &mut Sinks,
) -> Result<()> {
    let nets = GmmNets::new(hyper.m)?;
    for &seed in &spec.seeds {
        for (i, inst) in instances.iter().enumerate() {
            let model = GmmModel::new(inst, hyper);
            let enc = gmm::NeuralEncoder { model, nets: &nets, store: phi };
            let g = gmm::NeuralGlobalKernel { model, nets: &nets, store: phi };
            let l = gmm::NeuralLocalKernel { model, nets: &nets, store: phi };
            let penc = gmm::PriorEncoder { instance: inst, hyper };
            let pg = gmm::PriorGlobalKernel { hyper };
            let pl = gmm::PriorLocalKernel { hyper };
            let gg = gmm::GibbsGlobalKernel { model };
            let gl = gmm::GibbsLocalKernel { model };
            let mut run = new_run(spec, hmc, seed, i, None);
            let system =
                dispatch(&mut run, &model, (&enc, [&g, &l]), (&penc, [&pg, &pl]), Some([&gg, &gl]), hmc, &mut instance_rng(seed, i))?;
            sinks.finish(run, &system)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_dmm(
    spec: &EvalSpec,
    phi: &ParamStore,
    theta: &ParamStore,
    hyper: &DmmHyper,
    instances: &[DmmInstance],
    hmc: &HmcConfig,
    sinks: &mut Sinks,
) -> Result<()> {
    let nets = DmmNets::new(hyper.m)?;
    let decoder = Decoder::new();
    for &seed in &spec.seeds {
        for (i, inst) in instances.iter().enumerate() {
            let model = DmmModel { instance: inst, hyper, decoder: &decoder, theta };
            let enc = dmm::NeuralEncoder { model, nets: &nets, store: phi };
            let g = dmm::NeuralGlobalKernel { model, nets: &nets, store: phi };
            let l = dmm::NeuralLocalKernel { model, nets: &nets, store: phi };
            let penc = dmm::PriorEncoder { instance: inst, hyper };
            let pg = dmm::PriorGlobalKernel { hyper };
            let pl = dmm::PriorLocalKernel { hyper };
            let recon = |z: &dmm::DmmLatent| dmm::recon_mse(inst, z, &decoder, theta);
            let mut run = new_run(spec, hmc, seed, i, Some(&recon));
            let system = dispatch(&mut run, &model, (&enc, [&g, &l]), (&penc, [&pg, &pl]), None, hmc, &mut instance_rng(seed, i))?;
            sinks.finish(run, &system)?;
        }
    }
    Ok(())
}

fn new_run<'a, St>(
    spec: &EvalSpec,
    hmc: &HmcConfig,
    seed: u64,
    instance: usize,
    recon: Option<&'a dyn Fn(&St) -> apg_core::Result<f64>>,
) -> Run<'a, St> {
    Run {
        method: spec.method,
        seed,
        instance,
        sweeps: spec.sweeps,
        particles: spec.particles,
        lf: (spec.method == Method::HmcRws).then_some(hmc.leapfrog_steps),
        recon,
        rows: Vec::new(),
    }
}

/// Runs the evaluation, writes the metric CSV to `spec.out`, and returns
/// the rows written.
pub fn run_eval(spec: &EvalSpec) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let ck = Checkpoint::load(&spec.checkpoint)?;
    let corpus_path = spec.corpus.clone().unwrap_or_else(|| ck.config.test_corpus.clone());
    let corpus = corpus::read(&corpus_path)?;
    if corpus.model() != ck.model {
        return Err(HarnessError::Config(format!("{}: corpus model does not match the checkpoint", corpus_path.display())));
    }
    let mut hmc = ck.config.hmc.clone();
    if let Some(lf) = spec.lf {
        hmc.leapfrog_steps = lf;
    }
    hmc.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let take = |n: usize| spec.instances.map_or(n, |k| k.min(n));
    let dump = match &spec.dump_latents {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let mut sinks = Sinks { rows: Vec::new(), dump };
    match (ck.model, corpus) {
        (ModelKind::Gmm, Corpus::Gmm { hyper, instances }) => {
            check_hyper(&ck.hyper_as::<GmmHyper>()?.m, &hyper.m)?;
            eval_gmm(spec, &ck.phi, &hyper, &instances[..take(instances.len())], &hmc, &mut sinks)?
        }
        (ModelKind::Dmm, Corpus::Dmm { hyper, instances }) => {
            check_hyper(&ck.hyper_as::<DmmHyper>()?.m, &hyper.m)?;
            let theta = ck.theta.as_ref().ok_or_else(|| HarnessError::Config("DMM checkpoint lacks decoder parameters".into()))?;
            eval_dmm(spec, &ck.phi, theta, &hyper, &instances[..take(instances.len())], &hmc, &mut sinks)?
        }
        _ => unreachable!("models checked above"),
    }
    if let Some(mut d) = sinks.dump.take() {
        d.flush()?;
    }
    if let Some(dir) = spec.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = MetricWriter::create(&spec.out)?;
    for r in &sinks.rows {
        w.write(r)?;
    }
    w.flush()?;
    Ok(sinks.rows)
}

fn check_hyper(trained: &usize, corpus: &usize) -> Result<()> {
    if trained != corpus {
        return Err(HarnessError::Config(format!("checkpoint was trained for {trained} clusters, corpus has {corpus}")));
    }
    Ok(())
}
