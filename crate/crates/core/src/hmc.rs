//! Hamiltonian Monte Carlo with an identity mass matrix, dual-averaging step
//! size adaptation, and the HMC-RWS baseline that moves encoder samples with
//! HMC while keeping their importance weights.
//!
//! Continuous blocks are moved in unconstrained space. On the GMM the chain
//! targets `p(μ, log τ | x)` with the assignments summed out and `c` is then
//! drawn from its exact conditional. On the DMM the chain targets
//! `p(μ, logit h | x, c)` and `c` is redrawn from its enumerated conditional
//! afterwards. Both moves leave the posterior invariant, so weights carry
//! over unchanged.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dmm::{self, DmmLatent, DmmModel};
use crate::error::{argument, Error, Result};
use crate::exp_family::{sample_categorical, sample_normal};
use crate::gmm::{self, GmmLatent, GmmModel, DIM};
use crate::scalar::softmax;
use crate::smc::{Encoder, ParticleSystem, SweepMetrics, Target};

/// Unnormalized log-density with its gradient.
pub type LogDensity<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Scalar multiple of the identity mass matrix.
    pub mass: f64,
    /// Tune the step size during the first `adapt_fraction` of the updates.
    pub adapt: bool,
    pub target_accept: f64,
    pub adapt_fraction: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { step_size: 0.05, leapfrog_steps: 10, mass: 1.0, adapt: true, target_accept: 0.65, adapt_fraction: 0.5 }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(argument(format!("HMC step size must be positive, got {}", self.step_size)));
        }
        if self.leapfrog_steps == 0 {
            return Err(argument("HMC needs at least one leapfrog step"));
        }
        if !(self.mass > 0.0) {
            return Err(argument("HMC mass must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) || !(0.0..=1.0).contains(&self.adapt_fraction) {
            return Err(argument("HMC adaptation settings out of range"));
        }
        Ok(())
    }
}

/// A position with its cached log-density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub q: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl Point {
    pub fn at(f: &LogDensity, q: Vec<f64>) -> Result<Self> {
        let (log_density, grad) = f(&q)?;
        Ok(Self { q, log_density, grad })
    }
}

fn check_grad(g: &[f64]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite gradient in leapfrog".into()))
    }
}

/// `steps` leapfrog steps from `(start, p)`. Returns the end point and the
/// end momentum.
pub fn leapfrog(f: &LogDensity, start: &Point, p: &[f64], step: f64, steps: usize, mass: f64) -> Result<(Point, Vec<f64>)> {
    if p.len() != start.q.len() {
        return Err(argument("momentum does not match position"));
    }
    check_grad(&start.grad)?;
    let mut q = start.q.clone();
    let mut p: Vec<f64> = p.iter().zip(&start.grad).map(|(p, g)| p + 0.5 * step * g).collect();
    let mut point = start.clone();
    for s in 0..steps {
        for (q, p) in q.iter_mut().zip(&p) {
            *q += step * p / mass;
        }
        point = Point::at(f, q.clone())?;
        check_grad(&point.grad)?;
        let w = if s + 1 == steps { 0.5 } else { 1.0 };
        for (p, g) in p.iter_mut().zip(&point.grad) {
            *p += w * step * g;
        }
    }
    Ok((point, p))
}

pub fn hamiltonian(point: &Point, p: &[f64], mass: f64) -> f64 {
    -point.log_density + p.iter().map(|v| v * v).sum::<f64>() / (2.0 * mass)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub accept_prob: f64,
    pub accepted: bool,
    pub grad_evals: usize,
}

/// Momentum refresh, leapfrog and a Metropolis correction. Trajectories that
/// leave the support or hit a non-finite gradient are rejected.
pub fn hmc_step(f: &LogDensity, current: &Point, step: f64, cfg: &HmcConfig, rng: &mut dyn RngCore) -> Result<(Point, StepInfo)> {
    let sd = cfg.mass.sqrt();
    let p0: Vec<f64> = (0..current.q.len()).map(|_| sample_normal(0.0, sd, rng)).collect();
    let h0 = hamiltonian(current, &p0, cfg.mass);
    let u: f64 = rand::Rng::gen(rng);
    let reject = StepInfo { accept_prob: 0.0, accepted: false, grad_evals: cfg.leapfrog_steps };
    let (end, p1) = match leapfrog(f, current, &p0, step, cfg.leapfrog_steps, cfg.mass) {
        Ok(v) => v,
        Err(Error::Numeric(_)) => return Ok((current.clone(), reject)),
        Err(e) => return Err(e),
    };
    let h1 = hamiltonian(&end, &p1, cfg.mass);
    if !h1.is_finite() {
        return Ok((current.clone(), reject));
    }
    let accept_prob = (h0 - h1).exp().min(1.0);
    let accepted = u < accept_prob;
    let info = StepInfo { accept_prob, accepted, grad_evals: cfg.leapfrog_steps };
    Ok((if accepted { end } else { current.clone() }, info))
}

/// Step size adaptation toward a target acceptance rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(step: f64, target: f64) -> Self {
        Self { mu: (10.0 * step).ln(), target, h_bar: 0.0, log_step: step.ln(), log_step_bar: 0.0, t: 0.0 }
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let t = self.t;
        let eta = 1.0 / (t + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_step = self.mu - t.sqrt() / Self::GAMMA * self.h_bar;
        let w = t.powf(-Self::KAPPA);
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar;
        self.log_step.exp()
    }

    /// The averaged step size used once adaptation stops.
    pub fn final_step(&self) -> f64 {
        self.log_step_bar.exp()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HmcStats {
    pub proposals: usize,
    pub accepted: usize,
    pub sum_accept_prob: f64,
    pub grad_evals: usize,
}

impl HmcStats {
    pub fn record(&mut self, info: &StepInfo) {
        self.proposals += 1;
        self.accepted += info.accepted as usize;
        self.sum_accept_prob += info.accept_prob;
        self.grad_evals += info.grad_evals;
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.proposals.max(1) as f64
    }

    pub fn mean_accept_prob(&self) -> f64 {
        self.sum_accept_prob / self.proposals.max(1) as f64
    }
}

/// Runs one chain for `n` steps at a fixed step size and returns the
/// visited positions.
pub fn sample_chain(f: &LogDensity, q0: Vec<f64>, n: usize, cfg: &HmcConfig, rng: &mut dyn RngCore) -> Result<(Vec<Vec<f64>>, HmcStats)> {
    cfg.validate()?;
    let mut point = Point::at(f, q0)?;
    let mut stats = HmcStats::default();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (next, info) = hmc_step(f, &point, cfg.step_size, cfg, rng)?;
        stats.record(&info);
        point = next;
        out.push(point.q.clone());
    }
    Ok((out, stats))
}

/// A model whose continuous blocks can be moved by HMC given, or after
/// marginalizing, its discrete block.
pub trait HmcModel: Target {
    fn to_unconstrained(&self, z: &Self::State) -> Vec<f64>;

    /// Log-density of the unconstrained continuous variables, Jacobian
    /// included, with the discrete block of `z` held fixed where it is not
    /// summed out.
    fn unconstrained_log_density(&self, z: &Self::State, q: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Maps `q` back and redraws the discrete block from its exact
    /// conditional.
    fn complete(&self, z: &Self::State, q: &[f64], rng: &mut dyn RngCore) -> Result<Self::State>;
}

impl HmcModel for GmmModel<'_> {
    fn to_unconstrained(&self, z: &GmmLatent) -> Vec<f64> {
        gmm::pack_unconstrained(&z.mu, &z.tau)
    }

    fn unconstrained_log_density(&self, _z: &GmmLatent, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(gmm::marginal_unconstrained(self.instance, q, self.hyper))
    }

    fn complete(&self, _z: &GmmLatent, q: &[f64], rng: &mut dyn RngCore) -> Result<GmmLatent> {
        let (mu, tau) = gmm::unpack_unconstrained(q, self.hyper.m);
        let probs = gmm::exact_local_conditional(self.instance, &mu, &tau, self.hyper)?;
        let c = probs.iter().map(|p| sample_categorical(p, rng)).collect();
        Ok(GmmLatent { mu, tau, c })
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

impl HmcModel for DmmModel<'_> {
    fn to_unconstrained(&self, z: &DmmLatent) -> Vec<f64> {
        z.mu.iter().flatten().copied().chain(z.h.iter().map(|h| (h / (1.0 - h)).ln())).collect()
    }

    fn unconstrained_log_density(&self, z: &DmmLatent, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        dmm::conditional_unconstrained(self.instance, &z.c, q, self.decoder, self.theta, self.hyper)
    }

    fn complete(&self, _z: &DmmLatent, q: &[f64], rng: &mut dyn RngCore) -> Result<DmmLatent> {
        let m = self.hyper.m;
        let mu: Vec<[f64; DIM]> = (0..m).map(|k| [q[2 * k], q[2 * k + 1]]).collect();
        let h: Vec<f64> = q[m * DIM..].iter().map(|&u| sigmoid(u)).collect();
        let g = self.decoder.forward(self.theta, &h)?;
        let var = self.hyper.sigma_eps * self.hyper.sigma_eps;
        let c = self
            .instance
            .points
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let logits: Vec<f64> = mu
                    .iter()
                    .map(|centre| -(0..DIM).map(|d| (x[d] - g.get(i, d) - centre[d]).powi(2)).sum::<f64>() / (2.0 * var))
                    .collect();
                sample_categorical(&softmax(&logits), rng)
            })
            .collect();
        Ok(DmmLatent { mu, c, h })
    }
}

#[derive(Debug, Clone)]
pub struct HmcRun<St> {
    pub system: ParticleSystem<St>,
    pub metrics: Vec<SweepMetrics>,
    pub stats: HmcStats,
    /// Step size in use after adaptation.
    pub step_size: f64,
}

/// Importance samples from the encoder, then `updates` HMC moves of every
/// particle. Metrics are reported once after the importance step and once
/// after every update; an update costs `L · LF` log-joint gradient
/// evaluations.
pub fn hmc_rws_baseline<T: HmcModel>(
    target: &T,
    encoder: &dyn Encoder<T::State>,
    updates: usize,
    l: usize,
    cfg: &HmcConfig,
    rng: &mut dyn RngCore,
) -> Result<HmcRun<T::State>> {
    hmc_rws_trace(target, encoder, updates, l, cfg, rng, &mut |_| Ok(()))
}

/// As [`hmc_rws_baseline`], calling `observe` on the system after the
/// importance step and after every update.
pub fn hmc_rws_trace<T: HmcModel>(
    target: &T,
    encoder: &dyn Encoder<T::State>,
    updates: usize,
    l: usize,
    cfg: &HmcConfig,
    rng: &mut dyn RngCore,
    observe: &mut dyn FnMut(&ParticleSystem<T::State>) -> Result<()>,
) -> Result<HmcRun<T::State>> {
    cfg.validate()?;
    if l == 0 {
        return Err(argument("HMC-RWS needs at least one particle"));
    }
    let first = crate::estimators::rws_grad_phi(encoder, target, l, rng, None)?;
    let mut system = ParticleSystem::new(first.states, first.log_weights, first.log_joints)?;
    let mut metrics = vec![SweepMetrics::of(&system, l)?];
    observe(&system)?;
    let mut stats = HmcStats::default();
    let mut step = cfg.step_size;
    let mut tuner = DualAveraging::new(step, cfg.target_accept);
    let adapt_for = if cfg.adapt { (updates as f64 * cfg.adapt_fraction).round() as usize } else { 0 };
    for u in 0..updates {
        let mut accept = 0.0;
        let mut states = Vec::with_capacity(l);
        for z in &system.particles {
            let f = |q: &[f64]| target.unconstrained_log_density(z, q);
            let start = Point::at(&f, target.to_unconstrained(z))?;
            let (end, info) = hmc_step(&f, &start, step, cfg, rng)?;
            stats.record(&info);
            accept += info.accept_prob / l as f64;
            states.push(target.complete(z, &end.q, rng)?);
        }
        system.log_joints = target.log_joints(&states)?;
        system.particles = states;
        system.sweep += 1;
        if u < adapt_for {
            step = tuner.update(accept);
            if u + 1 == adapt_for {
                step = tuner.final_step();
            }
        }
        metrics.push(SweepMetrics::of(&system, l * cfg.leapfrog_steps)?);
        observe(&system)?;
    }
    Ok(HmcRun { system, metrics, stats, step_size: step })
}
