//! Block kernels and one-shot encoders for the DMM.

use rand::RngCore;

use super::nets::{
    beta_log_prob, conditional_globals, encoder_globals, h_log_params, local_log_probs, offsets, sample_betas, sample_rows,
    GaussVars,
};
use super::{DmmHyper, DmmInstance, DmmLatent, DmmModel, DmmNets};
use crate::diff::Var;
use crate::error::Result;
use crate::estimators::ScoreTape;
use crate::exp_family::{sample_beta, sample_categorical, sample_normal};
use crate::gmm::DIM;
use crate::smc::{BlockKernel, Encoder, Proposal};
use crate::{ParamStore, Tape, Tensor};

fn centres_tensor(states: &[DmmLatent]) -> Tensor {
    let rows = states.len() * states[0].mu.len();
    Tensor::from_vec(rows, DIM, states.iter().flat_map(|s| s.mu.iter().flatten().copied()).collect())
}

fn unpack_centres(mu: &Tensor, l: usize, m: usize) -> Vec<[f64; DIM]> {
    (0..m).map(|k| [mu.get(l * m + k, 0), mu.get(l * m + k, 1)]).collect()
}

fn finish<St>(states: Vec<St>, tape: Tape, log_q: Var, log_q_reverse: Vec<f64>, want_grad: bool) -> Proposal<St> {
    let lq = tape.value(log_q).data().to_vec();
    Proposal { states, log_q: lq, log_q_reverse, score: want_grad.then_some(ScoreTape { tape, log_q }) }
}

fn tile(tape: &mut Tape, g: GaussVars, l: usize) -> GaussVars {
    GaussVars { mean: tape.tile(g.mean, l), logvar: tape.tile(g.logvar, l) }
}

/// Learned `q(μ | x, c, h)`.
#[derive(Debug, Clone, Copy)]
pub struct NeuralGlobalKernel<'a> {
    pub model: DmmModel<'a>,
    pub nets: &'a DmmNets,
    pub store: &'a ParamStore,
}

impl BlockKernel<DmmLatent> for NeuralGlobalKernel<'_> {
    fn propose(&self, states: &[DmmLatent], rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<DmmLatent>> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let mut tape = Tape::new();
        let locals: Vec<_> = states.iter().map(|s| (s.c.as_slice(), s.h.as_slice())).collect();
        let (g, _) = conditional_globals(&mut tape, self.store, self.nets, inst, &locals, hyper)?;
        let mu = g.sample(&tape, rng);
        let lq = g.log_prob(&mut tape, &mu);
        let lq = tape.segment_sum(lq, hyper.m);
        let rev = g.log_prob(&mut tape, &centres_tensor(states));
        let rev = tape.segment_sum(rev, hyper.m);
        let rev = tape.value(rev).data().to_vec();
        let out = states
            .iter()
            .enumerate()
            .map(|(l, s)| DmmLatent { mu: unpack_centres(&mu, l, hyper.m), c: s.c.clone(), h: s.h.clone() })
            .collect();
        Ok(finish(out, tape, lq, rev, want_grad))
    }

    fn log_density(&self, z: &DmmLatent) -> Result<f64> {
        let mut tape = Tape::new();
        let (g, _) = conditional_globals(&mut tape, self.store, self.nets, self.model.instance, &[(&z.c, &z.h)], self.model.hyper)?;
        let lq = g.log_prob(&mut tape, &centres_tensor(std::slice::from_ref(z)));
        Ok(tape.value(lq).sum())
    }
}

/// Records `log q(c, h | x, μ)` for sampled locals and returns the per-particle
/// total, the sampled assignments and embeddings.
fn propose_locals(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &DmmNets,
    instance: &DmmInstance,
    mus: &[&[[f64; DIM]]],
    hyper: &DmmHyper,
    rng: &mut dyn RngCore,
) -> Result<(Var, Var, Vec<usize>, Vec<f64>)> {
    let n = instance.len();
    let lp = local_log_probs(tape, store, nets, instance, mus, hyper)?;
    let c = sample_rows(tape.value(lp), rng);
    let picked = tape.gather(lp, c.clone());
    let (la, lb) = h_log_params(tape, store, nets, offsets(instance, mus, &c))?;
    let h = sample_betas(tape, la, lb, rng);
    let lh = beta_log_prob(tape, la, lb, &h);
    let per_point = tape.add(picked, lh);
    Ok((tape.segment_sum(per_point, n), lp, c, h))
}

/// `log q(c, h | x, μ)` of existing locals, given the node of local
/// log-probabilities for the same centres.
fn locals_log_density(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &DmmNets,
    instance: &DmmInstance,
    mus: &[&[[f64; DIM]]],
    lp: Var,
    c: Vec<usize>,
    h: &[f64],
) -> Result<Var> {
    let picked = tape.gather(lp, c.clone());
    let (la, lb) = h_log_params(tape, store, nets, offsets(instance, mus, &c))?;
    let lh = beta_log_prob(tape, la, lb, h);
    let per_point = tape.add(picked, lh);
    Ok(tape.segment_sum(per_point, instance.len()))
}

/// Learned `q(c, h | x, μ)`: assignments first, then embeddings given the
/// assigned centre.
#[derive(Debug, Clone, Copy)]
pub struct NeuralLocalKernel<'a> {
    pub model: DmmModel<'a>,
    pub nets: &'a DmmNets,
    pub store: &'a ParamStore,
}

impl BlockKernel<DmmLatent> for NeuralLocalKernel<'_> {
    fn propose(&self, states: &[DmmLatent], rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<DmmLatent>> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let n = inst.len();
        let mut tape = Tape::new();
        let mus: Vec<&[[f64; DIM]]> = states.iter().map(|s| s.mu.as_slice()).collect();
        let (lq, lp, c, h) = propose_locals(&mut tape, self.store, self.nets, inst, &mus, hyper, rng)?;
        let c_old: Vec<usize> = states.iter().flat_map(|s| s.c.iter().copied()).collect();
        let h_old: Vec<f64> = states.iter().flat_map(|s| s.h.iter().copied()).collect();
        let rev = locals_log_density(&mut tape, self.store, self.nets, inst, &mus, lp, c_old, &h_old)?;
        let rev = tape.value(rev).data().to_vec();
        let out = states
            .iter()
            .enumerate()
            .map(|(l, s)| DmmLatent { mu: s.mu.clone(), c: c[l * n..(l + 1) * n].to_vec(), h: h[l * n..(l + 1) * n].to_vec() })
            .collect();
        Ok(finish(out, tape, lq, rev, want_grad))
    }

    fn log_density(&self, z: &DmmLatent) -> Result<f64> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let mut tape = Tape::new();
        let mus = [z.mu.as_slice()];
        let lp = local_log_probs(&mut tape, self.store, self.nets, inst, &mus, hyper)?;
        let v = locals_log_density(&mut tape, self.store, self.nets, inst, &mus, lp, z.c.clone(), &z.h)?;
        Ok(tape.value(v).get(0, 0))
    }
}

/// Learned one-shot `q(μ | x) q(c, h | x, μ)`.
#[derive(Debug, Clone, Copy)]
pub struct NeuralEncoder<'a> {
    pub model: DmmModel<'a>,
    pub nets: &'a DmmNets,
    pub store: &'a ParamStore,
}

impl Encoder<DmmLatent> for NeuralEncoder<'_> {
    fn sample(&self, l: usize, rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<DmmLatent>> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let n = inst.len();
        let mut tape = Tape::new();
        let (g, _) = encoder_globals(&mut tape, self.store, self.nets, inst, hyper)?;
        let g = tile(&mut tape, g, l);
        let mu = g.sample(&tape, rng);
        let lq_g = g.log_prob(&mut tape, &mu);
        let lq_g = tape.segment_sum(lq_g, hyper.m);
        let centres: Vec<Vec<[f64; DIM]>> = (0..l).map(|i| unpack_centres(&mu, i, hyper.m)).collect();
        let mus: Vec<&[[f64; DIM]]> = centres.iter().map(Vec::as_slice).collect();
        let (lq_l, _, c, h) = propose_locals(&mut tape, self.store, self.nets, inst, &mus, hyper, rng)?;
        let lq = tape.add(lq_g, lq_l);
        let states = centres
            .into_iter()
            .enumerate()
            .map(|(i, mu)| DmmLatent { mu, c: c[i * n..(i + 1) * n].to_vec(), h: h[i * n..(i + 1) * n].to_vec() })
            .collect();
        Ok(finish(states, tape, lq, Vec::new(), want_grad))
    }

    fn log_density(&self, z: &DmmLatent) -> Result<f64> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let mut tape = Tape::new();
        let (g, _) = encoder_globals(&mut tape, self.store, self.nets, inst, hyper)?;
        let lq_g = g.log_prob(&mut tape, &centres_tensor(std::slice::from_ref(z)));
        let global = tape.value(lq_g).sum();
        let mus = [z.mu.as_slice()];
        let lp = local_log_probs(&mut tape, self.store, self.nets, inst, &mus, hyper)?;
        let v = locals_log_density(&mut tape, self.store, self.nets, inst, &mus, lp, z.c.clone(), &z.h)?;
        Ok(global + tape.value(v).get(0, 0))
    }
}

fn prior_centres(hyper: &DmmHyper, rng: &mut dyn RngCore) -> Vec<[f64; DIM]> {
    (0..hyper.m).map(|_| [sample_normal(hyper.mu0, hyper.sigma0, rng), sample_normal(hyper.mu0, hyper.sigma0, rng)]).collect()
}

fn prior_centres_log_prob(hyper: &DmmHyper, mu: &[[f64; DIM]]) -> f64 {
    mu.iter().map(|m| hyper.log_mu_prior(m)).sum()
}

fn prior_locals_log_prob(hyper: &DmmHyper, h: &[f64]) -> f64 {
    h.iter().map(|&v| hyper.log_pi() + hyper.log_beta_prior(v)).sum()
}

fn prior_locals(hyper: &DmmHyper, n: usize, rng: &mut dyn RngCore) -> (Vec<usize>, Vec<f64>) {
    let uniform = vec![1.0; hyper.m];
    (0..n).map(|_| (sample_categorical(&uniform, rng), sample_beta(hyper.alpha, hyper.beta, rng))).unzip()
}

/// Centres drawn from the prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorGlobalKernel<'a> {
    pub hyper: &'a DmmHyper,
}

impl BlockKernel<DmmLatent> for PriorGlobalKernel<'_> {
    fn propose(&self, states: &[DmmLatent], rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<DmmLatent>> {
        let mut out = Vec::with_capacity(states.len());
        let (mut lq, mut rev) = (Vec::new(), Vec::new());
        for s in states {
            let mu = prior_centres(self.hyper, rng);
            lq.push(prior_centres_log_prob(self.hyper, &mu));
            rev.push(prior_centres_log_prob(self.hyper, &s.mu));
            out.push(DmmLatent { mu, c: s.c.clone(), h: s.h.clone() });
        }
        Ok(Proposal { states: out, log_q: lq, log_q_reverse: rev, score: None })
    }

    fn log_density(&self, z: &DmmLatent) -> Result<f64> {
        Ok(prior_centres_log_prob(self.hyper, &z.mu))
    }
}

/// Assignments and embeddings drawn from the prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorLocalKernel<'a> {
    pub hyper: &'a DmmHyper,
}

impl BlockKernel<DmmLatent> for PriorLocalKernel<'_> {
    fn propose(&self, states: &[DmmLatent], rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<DmmLatent>> {
        let mut out = Vec::with_capacity(states.len());
        let (mut lq, mut rev) = (Vec::new(), Vec::new());
        for s in states {
            let (c, h) = prior_locals(self.hyper, s.c.len(), rng);
            lq.push(prior_locals_log_prob(self.hyper, &h));
            rev.push(prior_locals_log_prob(self.hyper, &s.h));
            out.push(DmmLatent { mu: s.mu.clone(), c, h });
        }
        Ok(Proposal { states: out, log_q: lq, log_q_reverse: rev, score: None })
    }

    fn log_density(&self, z: &DmmLatent) -> Result<f64> {
        Ok(prior_locals_log_prob(self.hyper, &z.h))
    }
}

/// The full prior as a one-shot proposal.
#[derive(Debug, Clone, Copy)]
pub struct PriorEncoder<'a> {
    pub instance: &'a DmmInstance,
    pub hyper: &'a DmmHyper,
}

impl Encoder<DmmLatent> for PriorEncoder<'_> {
    fn sample(&self, l: usize, rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<DmmLatent>> {
        let mut states = Vec::with_capacity(l);
        let mut lq = Vec::with_capacity(l);
        for _ in 0..l {
            let mu = prior_centres(self.hyper, rng);
            let (c, h) = prior_locals(self.hyper, self.instance.len(), rng);
            lq.push(prior_centres_log_prob(self.hyper, &mu) + prior_locals_log_prob(self.hyper, &h));
            states.push(DmmLatent { mu, c, h });
        }
        Ok(Proposal { states, log_q: lq, log_q_reverse: Vec::new(), score: None })
    }

    fn log_density(&self, z: &DmmLatent) -> Result<f64> {
        Ok(prior_centres_log_prob(self.hyper, &z.mu) + prior_locals_log_prob(self.hyper, &z.h))
    }
}
