//! Self-normalized estimators: SNIS expectations and the score-function
//! gradients for proposal parameters φ and model parameters θ.
//!
//! Normalized weights always enter as plain numbers, so no gradient ever
//! flows through the weight computation.

use crate::diff::Var;
use crate::{GradBuffer, Tape};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, softmax};
use crate::smc::{Encoder, Target};
use crate::Tensor;
use rand::RngCore;

/// A recorded `L×1` column of `log q(z^l)` whose parameter gradient is taken
/// once the particle weights are known.
#[derive(Debug)]
pub struct ScoreTape {
    pub tape: Tape,
    pub log_q: Var,
}

impl ScoreTape {
    /// Adds `Σ_l seed_l ∇_φ log q(z^l)` into `buf`.
    pub fn backward(mut self, seed: &[f64], buf: &mut GradBuffer) -> Result<()> {
        let shape = self.tape.shape(self.log_q);
        if shape != (seed.len(), 1) {
            return Err(Error::Argument(format!("score seed of length {} for a {shape:?} node", seed.len())));
        }
        self.tape.backward(self.log_q, &Tensor::column(seed.to_vec()), Some(buf))
    }
}

/// Accumulated φ and θ ascent directions plus per-block update counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSink {
    pub phi: GradBuffer,
    pub theta: GradBuffer,
    pub block_updates: Vec<usize>,
}

impl GradSink {
    pub fn new(phi: GradBuffer, theta: GradBuffer) -> Self {
        Self { phi, theta, block_updates: Vec::new() }
    }

    fn count(&mut self, block: usize) {
        if self.block_updates.len() <= block {
            self.block_updates.resize(block + 1, 0);
        }
        self.block_updates[block] += 1;
    }

    /// Adds another sink into this one.
    pub fn merge(&mut self, other: &GradSink) -> Result<()> {
        self.phi.add_scaled(&other.phi, 1.0)?;
        self.theta.add_scaled(&other.theta, 1.0)?;
        for (b, &n) in other.block_updates.iter().enumerate() {
            if self.block_updates.len() <= b {
                self.block_updates.resize(b + 1, 0);
            }
            self.block_updates[b] += n;
        }
        Ok(())
    }
}

/// Softmax of log-weights, with the degenerate case reported as an error.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.iter().any(|w| w.is_nan()) {
        return Err(Error::Numeric("NaN log-weight".into()));
    }
    if log_sum_exp(log_weights) == f64::NEG_INFINITY {
        return Err(Error::Degenerate);
    }
    Ok(softmax(log_weights))
}

/// `Σ_l w̄^l f(z^l)`.
pub fn snis_expectation(log_weights: &[f64], values: &[f64]) -> Result<f64> {
    if log_weights.len() != values.len() {
        return Err(Error::Argument("weights and values differ in length".into()));
    }
    let w = normalized_weights(log_weights)?;
    Ok(w.iter().zip(values).filter(|(&wi, _)| wi > 0.0).map(|(wi, v)| wi * v).sum())
}

/// Weighted samples from one-shot importance sampling.
#[derive(Debug, Clone)]
pub struct WeightedSamples<St> {
    pub states: Vec<St>,
    pub log_weights: Vec<f64>,
    pub log_joints: Vec<f64>,
    pub log_q: Vec<f64>,
}

/// Draws `l` samples from the encoder, weights them by `p(x,z)/q(z|x)`, and
/// when a sink is given adds `Σ_l w̄^l ∇_φ log q(z^l|x)` to `sink.phi` and
/// `Σ_l w̄^l ∇_θ log p(x,z^l)` to `sink.theta`.
pub fn rws_grad_phi<T: Target>(
    encoder: &dyn Encoder<T::State>,
    target: &T,
    l: usize,
    rng: &mut dyn RngCore,
    sink: Option<&mut GradSink>,
) -> Result<WeightedSamples<T::State>> {
    let draw = encoder.sample(l, rng, sink.is_some())?;
    let log_joints = target.log_joints(&draw.states)?;
    let log_weights: Vec<f64> = log_joints.iter().zip(&draw.log_q).map(|(p, q)| p - q).collect();
    if let Some(sink) = sink {
        let w = normalized_weights(&log_weights)?;
        if let Some(score) = draw.score {
            score.backward(&w, &mut sink.phi)?;
        }
        target.theta_grad(&draw.states, &w, &mut sink.theta)?;
        sink.count(0);
    }
    Ok(WeightedSamples { states: draw.states, log_weights, log_joints, log_q: draw.log_q })
}

/// Adds `Σ_l w̄^l ∇_φ log q(z'^l_b | x, z^l_{−b})` for one block update,
/// where `log_weights` are the weights after the update.
pub fn apg_grad_phi_block(score: ScoreTape, block: usize, log_weights: &[f64], sink: &mut GradSink) -> Result<()> {
    let w = normalized_weights(log_weights)?;
    score.backward(&w, &mut sink.phi)?;
    sink.count(block);
    Ok(())
}

/// Adds `Σ_l w̄^l ∇_θ log p_θ(x, z^l)`; a no-op for models without θ.
pub fn grad_theta<T: Target>(target: &T, states: &[T::State], log_weights: &[f64], sink: &mut GradSink) -> Result<()> {
    if !target.has_theta() {
        return Ok(());
    }
    let w = normalized_weights(log_weights)?;
    target.theta_grad(states, &w, &mut sink.theta)
}
