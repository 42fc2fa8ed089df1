//! Block kernels and one-shot encoders for the GMM.

use rand::RngCore;

use super::nets::{conditional_globals, encoder_globals, local_log_probs, NgVars};
use super::{exact_global_conditional, exact_local_log_conditional, GmmHyper, GmmInstance, GmmLatent, GmmModel, DIM};
use super::GmmNets;
use crate::error::Result;
use crate::estimators::ScoreTape;
use crate::exp_family::{sample_categorical, NormalGammaParams};
use crate::diff::Var;
use crate::smc::{BlockKernel, Encoder, Proposal};
use crate::{ParamStore, Tape, Tensor};

fn globals_tensor(states: &[GmmLatent]) -> (Tensor, Tensor) {
    let rows = states.len() * states[0].mu.len();
    let mu = states.iter().flat_map(|s| s.mu.iter().flatten().copied()).collect();
    let tau = states.iter().flat_map(|s| s.tau.iter().flatten().copied()).collect();
    (Tensor::from_vec(rows, DIM, mu), Tensor::from_vec(rows, DIM, tau))
}

fn unpack_globals(mu: &Tensor, tau: &Tensor, l: usize, m: usize) -> (Vec<[f64; DIM]>, Vec<[f64; DIM]>) {
    let r = l * m;
    (
        (0..m).map(|k| [mu.get(r + k, 0), mu.get(r + k, 1)]).collect(),
        (0..m).map(|k| [tau.get(r + k, 0), tau.get(r + k, 1)]).collect(),
    )
}

fn column(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

/// Draws one assignment per row of an `(L·N)×M` log-probability node.
fn sample_rows(log_probs: &Tensor, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut buf = vec![0.0; log_probs.cols()];
    (0..log_probs.rows())
        .map(|r| {
            for (b, &lp) in buf.iter_mut().zip(log_probs.row_slice(r)) {
                *b = lp.exp();
            }
            sample_categorical(&buf, rng)
        })
        .collect()
}

fn finish<St>(states: Vec<St>, tape: Tape, log_q: Var, log_q_reverse: Vec<f64>, want_grad: bool) -> Proposal<St> {
    let lq = column(&tape, log_q);
    Proposal { states, log_q: lq, log_q_reverse, score: want_grad.then_some(ScoreTape { tape, log_q }) }
}

/// Learned `q(μ, τ | x, c)`.
#[derive(Debug, Clone, Copy)]
pub struct NeuralGlobalKernel<'a> {
    pub model: GmmModel<'a>,
    pub nets: &'a GmmNets,
    pub store: &'a ParamStore,
}

impl BlockKernel<GmmLatent> for NeuralGlobalKernel<'_> {
    fn propose(&self, states: &[GmmLatent], rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let mut tape = Tape::new();
        let cs: Vec<&[usize]> = states.iter().map(|s| s.c.as_slice()).collect();
        let ng = conditional_globals(&mut tape, self.store, self.nets, inst, &cs, hyper)?;
        let (mu, tau) = ng.sample(&tape, rng);
        let lq = ng.log_prob(&mut tape, &mu, &tau);
        let lq = tape.segment_sum(lq, hyper.m);
        let (old_mu, old_tau) = globals_tensor(states);
        let rev = ng.log_prob(&mut tape, &old_mu, &old_tau);
        let rev = tape.segment_sum(rev, hyper.m);
        let rev = column(&tape, rev);
        let new_states = states
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let (m, t) = unpack_globals(&mu, &tau, l, hyper.m);
                GmmLatent { mu: m, tau: t, c: s.c.clone() }
            })
            .collect();
        Ok(finish(new_states, tape, lq, rev, want_grad))
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        let mut tape = Tape::new();
        let ng = conditional_globals(&mut tape, self.store, self.nets, self.model.instance, &[&z.c], self.model.hyper)?;
        let (mu, tau) = globals_tensor(std::slice::from_ref(z));
        let lq = ng.log_prob(&mut tape, &mu, &tau);
        Ok(tape.value(lq).sum())
    }
}

/// Learned `q(c | x, μ, τ)`.
#[derive(Debug, Clone, Copy)]
pub struct NeuralLocalKernel<'a> {
    pub model: GmmModel<'a>,
    pub nets: &'a GmmNets,
    pub store: &'a ParamStore,
}

impl BlockKernel<GmmLatent> for NeuralLocalKernel<'_> {
    fn propose(&self, states: &[GmmLatent], rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let n = inst.len();
        let mut tape = Tape::new();
        let globals: Vec<_> = states.iter().map(|s| (s.mu.as_slice(), s.tau.as_slice())).collect();
        let lp = local_log_probs(&mut tape, self.store, self.nets, inst, &globals, hyper)?;
        let c_new = sample_rows(tape.value(lp), rng);
        let c_old: Vec<usize> = states.iter().flat_map(|s| s.c.iter().copied()).collect();
        let picked = tape.gather(lp, c_new.clone());
        let lq = tape.segment_sum(picked, n);
        let rev = tape.gather(lp, c_old);
        let rev = tape.segment_sum(rev, n);
        let rev = column(&tape, rev);
        let new_states = states
            .iter()
            .enumerate()
            .map(|(l, s)| GmmLatent { mu: s.mu.clone(), tau: s.tau.clone(), c: c_new[l * n..(l + 1) * n].to_vec() })
            .collect();
        Ok(finish(new_states, tape, lq, rev, want_grad))
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        let mut tape = Tape::new();
        let lp = local_log_probs(&mut tape, self.store, self.nets, self.model.instance, &[(&z.mu, &z.tau)], self.model.hyper)?;
        let v = tape.value(lp);
        Ok(z.c.iter().enumerate().map(|(i, &c)| v.get(i, c)).sum())
    }
}

/// Learned one-shot `q(μ, τ | x) q(c | x, μ, τ)`.
#[derive(Debug, Clone, Copy)]
pub struct NeuralEncoder<'a> {
    pub model: GmmModel<'a>,
    pub nets: &'a GmmNets,
    pub store: &'a ParamStore,
}

impl NeuralEncoder<'_> {
    fn tiled(tape: &mut Tape, ng: NgVars, l: usize) -> NgVars {
        NgVars { alpha: tape.tile(ng.alpha, l), nu: tape.tile(ng.nu, l), mu: tape.tile(ng.mu, l), beta: tape.tile(ng.beta, l) }
    }
}

impl Encoder<GmmLatent> for NeuralEncoder<'_> {
    fn sample(&self, l: usize, rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let n = inst.len();
        let mut tape = Tape::new();
        let ng = encoder_globals(&mut tape, self.store, self.nets, inst, hyper)?;
        let ng = Self::tiled(&mut tape, ng, l);
        let (mu, tau) = ng.sample(&tape, rng);
        let lq_g = ng.log_prob(&mut tape, &mu, &tau);
        let lq_g = tape.segment_sum(lq_g, hyper.m);
        let globals: Vec<_> = (0..l).map(|i| unpack_globals(&mu, &tau, i, hyper.m)).collect();
        let refs: Vec<_> = globals.iter().map(|(m, t)| (m.as_slice(), t.as_slice())).collect();
        let lp = local_log_probs(&mut tape, self.store, self.nets, inst, &refs, hyper)?;
        let c = sample_rows(tape.value(lp), rng);
        let picked = tape.gather(lp, c.clone());
        let lq_l = tape.segment_sum(picked, n);
        let lq = tape.add(lq_g, lq_l);
        let states = globals
            .into_iter()
            .enumerate()
            .map(|(i, (mu, tau))| GmmLatent { mu, tau, c: c[i * n..(i + 1) * n].to_vec() })
            .collect();
        Ok(finish(states, tape, lq, Vec::new(), want_grad))
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        let (inst, hyper) = (self.model.instance, self.model.hyper);
        let mut tape = Tape::new();
        let ng = encoder_globals(&mut tape, self.store, self.nets, inst, hyper)?;
        let (mu, tau) = globals_tensor(std::slice::from_ref(z));
        let lq_g = ng.log_prob(&mut tape, &mu, &tau);
        let g = tape.value(lq_g).sum();
        let lp = local_log_probs(&mut tape, self.store, self.nets, inst, &[(&z.mu, &z.tau)], hyper)?;
        let v = tape.value(lp);
        Ok(g + z.c.iter().enumerate().map(|(i, &c)| v.get(i, c)).sum::<f64>())
    }
}

fn ng_log_prob(params: &[NormalGammaParams<f64>], mu: &[[f64; DIM]], tau: &[[f64; DIM]]) -> Result<f64> {
    params.iter().zip(mu.iter().zip(tau)).map(|(p, (m, t))| p.log_prob(m, t)).sum()
}

fn ng_sample(params: &[NormalGammaParams<f64>], rng: &mut dyn RngCore) -> (Vec<[f64; DIM]>, Vec<[f64; DIM]>) {
    params
        .iter()
        .map(|p| {
            let (m, t) = p.sample(rng);
            ([m[0], m[1]], [t[0], t[1]])
        })
        .unzip()
}

fn log_rows_at(rows: &[Vec<f64>], c: &[usize]) -> f64 {
    rows.iter().zip(c).map(|(r, &k)| r[k]).sum()
}

/// Exact `p(μ, τ | x, c)`.
#[derive(Debug, Clone, Copy)]
pub struct GibbsGlobalKernel<'a> {
    pub model: GmmModel<'a>,
}

impl BlockKernel<GmmLatent> for GibbsGlobalKernel<'_> {
    fn propose(&self, states: &[GmmLatent], rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let mut out = Vec::with_capacity(states.len());
        let (mut lq, mut rev) = (Vec::with_capacity(states.len()), Vec::with_capacity(states.len()));
        for s in states {
            let post = exact_global_conditional(self.model.instance, &s.c, self.model.hyper)?;
            let (mu, tau) = ng_sample(&post, rng);
            lq.push(ng_log_prob(&post, &mu, &tau)?);
            rev.push(ng_log_prob(&post, &s.mu, &s.tau)?);
            out.push(GmmLatent { mu, tau, c: s.c.clone() });
        }
        Ok(Proposal { states: out, log_q: lq, log_q_reverse: rev, score: None })
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        let post = exact_global_conditional(self.model.instance, &z.c, self.model.hyper)?;
        ng_log_prob(&post, &z.mu, &z.tau)
    }
}

/// Exact `p(c | x, μ, τ)`.
#[derive(Debug, Clone, Copy)]
pub struct GibbsLocalKernel<'a> {
    pub model: GmmModel<'a>,
}

impl BlockKernel<GmmLatent> for GibbsLocalKernel<'_> {
    fn propose(&self, states: &[GmmLatent], rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let mut out = Vec::with_capacity(states.len());
        let (mut lq, mut rev) = (Vec::with_capacity(states.len()), Vec::with_capacity(states.len()));
        for s in states {
            let rows = exact_local_log_conditional(self.model.instance, &s.mu, &s.tau, self.model.hyper)?;
            let c: Vec<usize> = rows
                .iter()
                .map(|r| sample_categorical(&r.iter().map(|v| v.exp()).collect::<Vec<_>>(), rng))
                .collect();
            lq.push(log_rows_at(&rows, &c));
            rev.push(log_rows_at(&rows, &s.c));
            out.push(GmmLatent { mu: s.mu.clone(), tau: s.tau.clone(), c });
        }
        Ok(Proposal { states: out, log_q: lq, log_q_reverse: rev, score: None })
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        let rows = exact_local_log_conditional(self.model.instance, &z.mu, &z.tau, self.model.hyper)?;
        Ok(log_rows_at(&rows, &z.c))
    }
}

/// Global block drawn from the prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorGlobalKernel<'a> {
    pub hyper: &'a GmmHyper,
}

impl BlockKernel<GmmLatent> for PriorGlobalKernel<'_> {
    fn propose(&self, states: &[GmmLatent], rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let prior = vec![self.hyper.prior(); self.hyper.m];
        let mut out = Vec::with_capacity(states.len());
        let (mut lq, mut rev) = (Vec::new(), Vec::new());
        for s in states {
            let (mu, tau) = ng_sample(&prior, rng);
            lq.push(ng_log_prob(&prior, &mu, &tau)?);
            rev.push(ng_log_prob(&prior, &s.mu, &s.tau)?);
            out.push(GmmLatent { mu, tau, c: s.c.clone() });
        }
        Ok(Proposal { states: out, log_q: lq, log_q_reverse: rev, score: None })
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        ng_log_prob(&vec![self.hyper.prior(); self.hyper.m], &z.mu, &z.tau)
    }
}

/// Assignments drawn from the uniform prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorLocalKernel<'a> {
    pub hyper: &'a GmmHyper,
}

impl BlockKernel<GmmLatent> for PriorLocalKernel<'_> {
    fn propose(&self, states: &[GmmLatent], rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let m = self.hyper.m;
        let uniform = vec![1.0; m];
        let lq_each = |n: usize| n as f64 * self.hyper.log_pi();
        let out: Vec<GmmLatent> = states
            .iter()
            .map(|s| GmmLatent {
                mu: s.mu.clone(),
                tau: s.tau.clone(),
                c: (0..s.c.len()).map(|_| sample_categorical(&uniform, rng)).collect(),
            })
            .collect();
        let lq = states.iter().map(|s| lq_each(s.c.len())).collect::<Vec<_>>();
        Ok(Proposal { states: out, log_q: lq.clone(), log_q_reverse: lq, score: None })
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        Ok(z.c.len() as f64 * self.hyper.log_pi())
    }
}

/// The full prior as a one-shot proposal.
#[derive(Debug, Clone, Copy)]
pub struct PriorEncoder<'a> {
    pub instance: &'a GmmInstance,
    pub hyper: &'a GmmHyper,
}

impl Encoder<GmmLatent> for PriorEncoder<'_> {
    fn sample(&self, l: usize, rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<GmmLatent>> {
        let prior = vec![self.hyper.prior(); self.hyper.m];
        let uniform = vec![1.0; self.hyper.m];
        let n = self.instance.len();
        let mut states = Vec::with_capacity(l);
        let mut lq = Vec::with_capacity(l);
        for _ in 0..l {
            let (mu, tau) = ng_sample(&prior, rng);
            let c = (0..n).map(|_| sample_categorical(&uniform, rng)).collect();
            lq.push(ng_log_prob(&prior, &mu, &tau)? + n as f64 * self.hyper.log_pi());
            states.push(GmmLatent { mu, tau, c });
        }
        Ok(Proposal { states, log_q: lq, log_q_reverse: Vec::new(), score: None })
    }

    fn log_density(&self, z: &GmmLatent) -> Result<f64> {
        Ok(ng_log_prob(&vec![self.hyper.prior(); self.hyper.m], &z.mu, &z.tau)? + z.c.len() as f64 * self.hyper.log_pi())
    }
}
