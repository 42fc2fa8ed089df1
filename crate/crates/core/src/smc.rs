//! Particle systems, resampling, incremental weights and the APG sweep loop.
//!
//! Models plug in through three traits. A [`Target`] evaluates the
//! unnormalized log-joint `log p(x, z)` of one data instance. An [`Encoder`]
//! is the one-shot proposal `q(z | x)` that seeds the first sweep. A
//! [`BlockKernel`] proposes a new value for one block given the rest of the
//! state. All of them work on the whole particle population at once so that
//! neural proposals can run as a single batched forward pass.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::estimators::{apg_grad_phi_block, grad_theta, normalized_weights, GradSink, ScoreTape};
use crate::scalar::{log_mean_exp, log_sum_exp};
use crate::GradBuffer;

/// Unnormalized log-density of the latent state for one data instance.
pub trait Target {
    type State: Clone;

    fn log_joint(&self, z: &Self::State) -> Result<f64>;

    fn log_joints(&self, zs: &[Self::State]) -> Result<Vec<f64>> {
        zs.iter().map(|z| self.log_joint(z)).collect()
    }

    /// Whether the log-joint depends on learnable parameters θ.
    fn has_theta(&self) -> bool {
        false
    }

    /// Adds `Σ_l weights[l] ∇_θ log p(x, z^l)` into `buf`.
    fn theta_grad(&self, _zs: &[Self::State], _weights: &[f64], _buf: &mut GradBuffer) -> Result<()> {
        Ok(())
    }
}

/// Output of a batched proposal over `L` particles.
#[derive(Debug)]
pub struct Proposal<St> {
    /// Full states, with the proposed block substituted.
    pub states: Vec<St>,
    /// `log q(z'_b | x, z_{−b})` for the proposed values.
    pub log_q: Vec<f64>,
    /// `log q(z_b | x, z_{−b})` for the values being replaced; empty for
    /// encoders.
    pub log_q_reverse: Vec<f64>,
    /// Recorded `log q` column for the φ gradient, when one was requested.
    pub score: Option<ScoreTape>,
}

/// One-shot proposal `q(z | x)`.
pub trait Encoder<St> {
    fn sample(&self, l: usize, rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<St>>;

    fn log_density(&self, z: &St) -> Result<f64>;
}

/// Conditional proposal for one block, `q(z_b | x, z_{−b})`.
pub trait BlockKernel<St> {
    /// Proposes a new block value for every particle.
    fn propose(&self, states: &[St], rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<St>>;

    /// `log q(z_b | x, z_{−b})` of the block value already in `z`.
    fn log_density(&self, z: &St) -> Result<f64>;
}

/// An encoder used as the kernel of a single block spanning the whole
/// state, so `z_{−b}` is empty and the reverse density is the encoder's.
pub struct EncoderKernel<'a, St>(pub &'a dyn Encoder<St>);

impl<St> BlockKernel<St> for EncoderKernel<'_, St> {
    fn propose(&self, states: &[St], rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<St>> {
        let mut prop = self.0.sample(states.len(), rng, want_grad)?;
        prop.log_q_reverse = states.iter().map(|z| self.0.log_density(z)).collect::<Result<_>>()?;
        Ok(prop)
    }

    fn log_density(&self, z: &St) -> Result<f64> {
        self.0.log_density(z)
    }
}

/// `L` weighted particles for one data instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem<St> {
    pub particles: Vec<St>,
    pub log_weights: Vec<f64>,
    /// Cached `log p(x, z^l)`.
    pub log_joints: Vec<f64>,
    /// Ancestor indices from the most recent resampling.
    pub ancestors: Option<Vec<usize>>,
    /// Number of completed sweeps.
    pub sweep: usize,
}

impl<St: Clone> ParticleSystem<St> {
    pub fn new(particles: Vec<St>, log_weights: Vec<f64>, log_joints: Vec<f64>) -> Result<Self> {
        if particles.is_empty() || particles.len() != log_weights.len() || particles.len() != log_joints.len() {
            return Err(Error::Argument("particle, weight and log-joint counts must match and be nonzero".into()));
        }
        if !log_weights.iter().any(|w| w.is_finite()) {
            return Err(Error::Numeric("no particle has a finite log-weight".into()));
        }
        Ok(Self { particles, log_weights, log_joints, ancestors: None, sweep: 1 })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    /// SNIS estimate of `E[log p(x, z)]`.
    pub fn mean_log_joint(&self) -> Result<f64> {
        crate::estimators::snis_expectation(&self.log_weights, &self.log_joints)
    }

    /// `log Ẑ = log mean_l w^l`.
    pub fn log_evidence(&self) -> f64 {
        log_mean_exp(&self.log_weights)
    }
}

/// Effective sample size `(Σw)² / Σw²`, computed from log-weights.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let lse = log_sum_exp(log_weights);
    if lse == f64::NEG_INFINITY || log_weights.iter().any(|w| w.is_nan()) {
        return Err(Error::Degenerate);
    }
    let doubled: Vec<f64> = log_weights.iter().map(|w| 2.0 * w).collect();
    Ok((2.0 * lse - log_sum_exp(&doubled)).exp())
}

/// Draws `L` ancestors with probability proportional to the weights, using
/// one batch of sorted uniforms walked against the weight CDF.
pub fn multinomial_ancestors(log_weights: &[f64], rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    let probs = normalized_weights(log_weights)?;
    let l = probs.len();
    let mut u: Vec<f64> = (0..l).map(|_| rng.gen::<f64>()).collect();
    u.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(l);
    let mut idx = 0;
    let mut cdf = probs[0];
    let last = probs.iter().rposition(|&p| p > 0.0).expect("some positive weight");
    for ui in u {
        while ui >= cdf && idx < last {
            idx += 1;
            cdf += probs[idx];
        }
        out.push(idx);
    }
    Ok(out)
}

/// Resamples the system: particles are copied from multinomial ancestors
/// and every weight becomes the mean incoming weight.
pub fn multinomial_resample<St: Clone>(system: &ParticleSystem<St>, rng: &mut dyn RngCore) -> Result<ParticleSystem<St>> {
    let ancestors = multinomial_ancestors(&system.log_weights, rng)?;
    let mean = log_mean_exp(&system.log_weights);
    Ok(ParticleSystem {
        particles: ancestors.iter().map(|&a| system.particles[a].clone()).collect(),
        log_weights: vec![mean; ancestors.len()],
        log_joints: ancestors.iter().map(|&a| system.log_joints[a]).collect(),
        ancestors: Some(ancestors),
        sweep: system.sweep,
    })
}

/// `log v = log p(x, z') − log p(x, z) + log q(z_b | ·) − log q(z'_b | ·)`.
pub fn incremental_log_weight(log_joint_new: f64, log_joint_old: f64, log_q_old: f64, log_q_new: f64) -> Result<f64> {
    if log_joint_new == f64::NEG_INFINITY && log_joint_old == f64::NEG_INFINITY {
        return Err(Error::Numeric("log-joint is -inf for both the old and the new state".into()));
    }
    let v = (log_joint_new - log_joint_old) + (log_q_old - log_q_new);
    if v.is_nan() {
        return Err(Error::Numeric("incremental weight is NaN".into()));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Resampling {
    /// Before every block update.
    #[default]
    Always,
    /// Never; weights accumulate as in sequential importance sampling.
    Never,
    /// Only when ESS/L falls below the threshold.
    EssBelow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SweepOptions {
    pub resampling: Resampling,
}

/// Diagnostics recorded after each sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    pub sweep: usize,
    pub mean_log_joint: f64,
    pub ess: f64,
    pub log_evidence: f64,
    /// Log-joint evaluations spent in this sweep.
    pub log_joint_evals: usize,
}

impl SweepMetrics {
    pub fn of<St: Clone>(system: &ParticleSystem<St>, log_joint_evals: usize) -> Result<Self> {
        Ok(Self {
            sweep: system.sweep,
            mean_log_joint: system.mean_log_joint()?,
            ess: system.ess()?,
            log_evidence: system.log_evidence(),
            log_joint_evals,
        })
    }
}

/// One sweep of block updates, one kernel per block in order. When a sink
/// is given, the φ gradient of each block and the θ gradient are added
/// after every block update.
pub fn apg_sweep<T: Target>(
    system: ParticleSystem<T::State>,
    target: &T,
    kernels: &[&dyn BlockKernel<T::State>],
    rng: &mut dyn RngCore,
    mut sink: Option<&mut GradSink>,
    opts: SweepOptions,
) -> Result<ParticleSystem<T::State>> {
    let mut system = system;
    for (b, kernel) in kernels.iter().enumerate() {
        let resample = match opts.resampling {
            Resampling::Always => true,
            Resampling::Never => false,
            Resampling::EssBelow(t) => system.ess()? < t * system.len() as f64,
        };
        if resample {
            system = multinomial_resample(&system, rng)?;
        }
        let prop = kernel.propose(&system.particles, rng, sink.is_some())?;
        let log_joints = target.log_joints(&prop.states)?;
        let mut log_weights = Vec::with_capacity(system.len());
        for l in 0..system.len() {
            let v = incremental_log_weight(log_joints[l], system.log_joints[l], prop.log_q_reverse[l], prop.log_q[l])?;
            log_weights.push(system.log_weights[l] + v);
        }
        system.particles = prop.states;
        system.log_weights = log_weights;
        system.log_joints = log_joints;
        if let Some(sink) = sink.as_deref_mut() {
            // block 0 of the sink counts the encoder
            if let Some(score) = prop.score {
                apg_grad_phi_block(score, b + 1, &system.log_weights, sink)?;
            }
            grad_theta(target, &system.particles, &system.log_weights, sink)?;
        }
    }
    system.sweep += 1;
    Ok(system)
}

/// Sweep 1 by importance sampling from the encoder, then `k − 1` APG
/// sweeps. Returns the weighted, un-resampled final system and metrics for
/// every sweep.
pub fn apg_run<T: Target>(
    target: &T,
    encoder: &dyn Encoder<T::State>,
    kernels: &[&dyn BlockKernel<T::State>],
    k: usize,
    l: usize,
    rng: &mut dyn RngCore,
    mut sink: Option<&mut GradSink>,
    opts: SweepOptions,
) -> Result<(ParticleSystem<T::State>, Vec<SweepMetrics>)> {
    if k == 0 || l == 0 {
        return Err(Error::Argument("APG needs at least one sweep and one particle".into()));
    }
    let first = crate::estimators::rws_grad_phi(encoder, target, l, rng, sink.as_deref_mut())?;
    let mut system = ParticleSystem::new(first.states, first.log_weights, first.log_joints)?;
    let mut metrics = vec![SweepMetrics::of(&system, l)?];
    for _ in 1..k {
        system = apg_sweep(system, target, kernels, rng, sink.as_deref_mut(), opts)?;
        metrics.push(SweepMetrics::of(&system, l * kernels.len())?);
    }
    Ok((system, metrics))
}
