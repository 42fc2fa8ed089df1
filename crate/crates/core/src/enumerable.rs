//! Models small enough to sum over every latent state, and table-driven
//! proposals for them. These give exact references for the sampler and the
//! gradient estimators.
//!
//! The state is always an assignment vector `c ∈ {0..M}^N`. States are
//! indexed lexicographically with `c[0]` as the most significant digit.

use rand::RngCore;

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::estimators::ScoreTape;
use crate::exp_family::{normal_gamma_posterior, sample_categorical};
use crate::gmm::{cluster_statistics, GmmHyper, GmmInstance, DIM, LN_2PI};
use crate::scalar::{log_sum_exp, softmax, Scalar};
use crate::smc::{BlockKernel, Encoder, Proposal, Target};
use crate::{GradBuffer, ParamStore, Tape, Tensor};

/// A target over assignment vectors that can be enumerated.
pub trait Discrete: Target<State = Vec<usize>> {
    fn points(&self) -> usize;
    fn classes(&self) -> usize;
}

pub fn num_states(n: usize, m: usize) -> usize {
    m.pow(n as u32)
}

pub fn state_index(c: &[usize], m: usize) -> usize {
    c.iter().fold(0, |acc, &k| acc * m + k)
}

pub fn state_at(mut idx: usize, n: usize, m: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for slot in c.iter_mut().rev() {
        *slot = idx % m;
        idx /= m;
    }
    c
}

pub fn all_states(n: usize, m: usize) -> Vec<Vec<usize>> {
    (0..num_states(n, m)).map(|i| state_at(i, n, m)).collect()
}

/// Index of `c` with position `block` removed.
pub fn context_index(c: &[usize], block: usize, m: usize) -> usize {
    c.iter().enumerate().filter(|&(i, _)| i != block).fold(0, |acc, (_, &k)| acc * m + k)
}

pub fn log_joint_table<T: Discrete>(target: &T) -> Result<Vec<f64>> {
    target.log_joints(&all_states(target.points(), target.classes()))
}

/// `log p(x) = log Σ_c p(x, c)`.
pub fn log_evidence<T: Discrete>(target: &T) -> Result<f64> {
    Ok(log_sum_exp(&log_joint_table(target)?))
}

/// `p(c | x)` over all states in index order.
pub fn posterior<T: Discrete>(target: &T) -> Result<Vec<f64>> {
    Ok(softmax(&log_joint_table(target)?))
}

/// `p(c_block | x, c_{−block})` as probabilities over the classes.
pub fn conditional<T: Discrete>(target: &T, c: &[usize], block: usize) -> Result<Vec<f64>> {
    let states: Vec<Vec<usize>> = (0..target.classes())
        .map(|k| {
            let mut s = c.to_vec();
            s[block] = k;
            s
        })
        .collect();
    Ok(softmax(&target.log_joints(&states)?))
}

/// GMM with the cluster means and precisions integrated out analytically.
#[derive(Debug, Clone)]
pub struct CollapsedGmm {
    pub instance: GmmInstance,
    pub hyper: GmmHyper,
}

impl CollapsedGmm {
    /// Two clusters and three points, one of them ambiguous.
    pub fn reference() -> Self {
        let hyper = GmmHyper { m: 2, ..GmmHyper::default() };
        Self { instance: GmmInstance::new(vec![[-1.5, 0.3], [1.2, -0.4], [0.9, 0.8]]), hyper }
    }

    /// `log ∫ Π_{n∈cluster} N(x_n; μ, 1/τ) NG(μ, τ) dμ dτ` for one cluster,
    /// summed over coordinates.
    fn cluster_evidence(&self, count: f64, s1: &[f64; DIM], s2: &[f64; DIM]) -> Result<f64> {
        let prior = self.hyper.prior();
        let post = normal_gamma_posterior(&prior, count, s1, s2)?;
        let mut total = 0.0;
        for d in 0..DIM {
            total += post.alpha.lgamma() - prior.alpha.lgamma() + prior.alpha * prior.beta[d].ln()
                - post.alpha * post.beta[d].ln()
                + 0.5 * (prior.nu / post.nu).ln()
                - 0.5 * count * LN_2PI;
        }
        Ok(total)
    }
}

impl Target for CollapsedGmm {
    type State = Vec<usize>;

    fn log_joint(&self, c: &Vec<usize>) -> Result<f64> {
        if c.len() != self.instance.len() || c.iter().any(|&k| k >= self.hyper.m) {
            return Err(Error::Argument("assignment does not fit the instance".into()));
        }
        let mut lp = c.len() as f64 * self.hyper.log_pi();
        for (count, s1, s2) in cluster_statistics(&self.instance, c, self.hyper.m) {
            lp += self.cluster_evidence(count, &s1, &s2)?;
        }
        Ok(lp)
    }
}

impl Discrete for CollapsedGmm {
    fn points(&self) -> usize {
        self.instance.len()
    }

    fn classes(&self) -> usize {
        self.hyper.m
    }
}

/// One-dimensional mixture with a single learnable loading θ:
/// `c_n ~ Uniform(M)`, `x_n | c_n ~ Normal(θ·a[c_n], 1)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearMixture<'a> {
    pub x: &'a [f64],
    pub loadings: &'a [f64],
    pub store: &'a ParamStore,
}

impl<'a> LinearMixture<'a> {
    pub const PARAM: &'static str = "theta";

    pub fn init_store(theta: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert(Self::PARAM, Tensor::scalar(theta)).expect("fresh store");
        store
    }

    pub fn theta(&self) -> f64 {
        self.store.get(Self::PARAM).expect("theta parameter").get(0, 0)
    }

    /// `log p_θ(x)` at an arbitrary θ, summing the mixture per point.
    pub fn log_marginal_at(&self, theta: f64) -> f64 {
        let m = self.loadings.len() as f64;
        self.x
            .iter()
            .map(|&x| {
                let terms: Vec<f64> = self.loadings.iter().map(|&a| -0.5 * (x - theta * a).powi(2)).collect();
                log_sum_exp(&terms) - m.ln() - 0.5 * LN_2PI
            })
            .sum()
    }
}

impl Target for LinearMixture<'_> {
    type State = Vec<usize>;

    fn log_joint(&self, c: &Vec<usize>) -> Result<f64> {
        let theta = self.theta();
        let m = self.loadings.len() as f64;
        let mut lp = 0.0;
        for (&x, &k) in self.x.iter().zip(c) {
            let a = *self.loadings.get(k).ok_or_else(|| Error::Argument(format!("class {k} out of range")))?;
            lp += -m.ln() - 0.5 * LN_2PI - 0.5 * (x - theta * a).powi(2);
        }
        Ok(lp)
    }

    fn has_theta(&self) -> bool {
        true
    }

    fn theta_grad(&self, zs: &[Vec<usize>], weights: &[f64], buf: &mut GradBuffer) -> Result<()> {
        let theta = self.theta();
        let mut g = 0.0;
        for (c, &w) in zs.iter().zip(weights) {
            let d: f64 = self.x.iter().zip(c).map(|(&x, &k)| (x - theta * self.loadings[k]) * self.loadings[k]).sum();
            g += w * d;
        }
        let idx = self.store.index_of(Self::PARAM).expect("theta parameter");
        buf.add_at(idx, &Tensor::scalar(g));
        Ok(())
    }
}

impl Discrete for LinearMixture<'_> {
    fn points(&self) -> usize {
        self.x.len()
    }

    fn classes(&self) -> usize {
        self.loadings.len()
    }
}

fn draw_rows(log_probs: &Tensor, rng: &mut dyn RngCore) -> Vec<usize> {
    (0..log_probs.rows())
        .map(|r| {
            let p: Vec<f64> = log_probs.row_slice(r).iter().map(|v| v.exp()).collect();
            sample_categorical(&p, rng)
        })
        .collect()
}

fn finish(states: Vec<Vec<usize>>, tape: Tape, log_q: Var, log_q_reverse: Vec<f64>, want_grad: bool) -> Proposal<Vec<usize>> {
    let lq = tape.value(log_q).data().to_vec();
    Proposal { states, log_q: lq, log_q_reverse, score: want_grad.then_some(ScoreTape { tape, log_q }) }
}

/// Joint softmax over all `M^N` states; the logits are a `1×M^N` parameter.
#[derive(Debug, Clone, Copy)]
pub struct TableEncoder<'a> {
    pub store: &'a ParamStore,
    pub name: &'a str,
    pub n: usize,
    pub m: usize,
}

impl TableEncoder<'_> {
    pub fn insert_logits(store: &mut ParamStore, name: &str, logits: Vec<f64>) -> Result<()> {
        store.insert(name, Tensor::from_vec(1, logits.len(), logits))
    }

    fn log_probs(&self) -> Result<Vec<f64>> {
        let logits = self.store.get(self.name).ok_or_else(|| Error::Argument(format!("missing parameter {}", self.name)))?;
        let lse = log_sum_exp(logits.data());
        Ok(logits.data().iter().map(|v| v - lse).collect())
    }
}

impl Encoder<Vec<usize>> for TableEncoder<'_> {
    fn sample(&self, l: usize, rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<Vec<usize>>> {
        let mut tape = Tape::new();
        let p = tape.param(self.store, self.name)?;
        let lp = tape.log_softmax(p);
        let lp = tape.tile(lp, l);
        let idx = draw_rows(tape.value(lp), rng);
        let states = idx.iter().map(|&i| state_at(i, self.n, self.m)).collect();
        let lq = tape.gather(lp, idx);
        Ok(finish(states, tape, lq, Vec::new(), want_grad))
    }

    fn log_density(&self, z: &Vec<usize>) -> Result<f64> {
        Ok(self.log_probs()?[state_index(z, self.m)])
    }
}

/// `q(c_block | c_{−block})` from an `M^{N−1}×M` logit table indexed by the
/// context.
#[derive(Debug, Clone, Copy)]
pub struct TableKernel<'a> {
    pub store: &'a ParamStore,
    pub name: &'a str,
    pub block: usize,
    pub m: usize,
}

impl TableKernel<'_> {
    /// Logits equal to the log of the exact conditional for every context.
    pub fn exact_logits<T: Discrete>(target: &T, block: usize) -> Result<Tensor> {
        let (n, m) = (target.points(), target.classes());
        let rows = num_states(n - 1, m);
        let mut out = Tensor::zeros(rows, m);
        for ctx in 0..rows {
            let rest = state_at(ctx, n - 1, m);
            let mut c = rest.clone();
            c.insert(block, 0);
            for (k, p) in conditional(target, &c, block)?.into_iter().enumerate() {
                out.set(ctx, k, p.ln());
            }
        }
        Ok(out)
    }
}

impl BlockKernel<Vec<usize>> for TableKernel<'_> {
    fn propose(&self, states: &[Vec<usize>], rng: &mut dyn RngCore, want_grad: bool) -> Result<Proposal<Vec<usize>>> {
        let mut tape = Tape::new();
        let p = tape.param(self.store, self.name)?;
        let ctx: Vec<usize> = states.iter().map(|c| context_index(c, self.block, self.m)).collect();
        let rows = tape.select_rows(p, ctx);
        let lp = tape.log_softmax(rows);
        let picked = draw_rows(tape.value(lp), rng);
        let old: Vec<usize> = states.iter().map(|c| c[self.block]).collect();
        let rev = tape.gather(lp, old);
        let rev = tape.value(rev).data().to_vec();
        let lq = tape.gather(lp, picked.clone());
        let new_states = states
            .iter()
            .zip(&picked)
            .map(|(c, &k)| {
                let mut s = c.clone();
                s[self.block] = k;
                s
            })
            .collect();
        Ok(finish(new_states, tape, lq, rev, want_grad))
    }

    fn log_density(&self, z: &Vec<usize>) -> Result<f64> {
        let table = self.store.get(self.name).ok_or_else(|| Error::Argument(format!("missing parameter {}", self.name)))?;
        let row = table.row_slice(context_index(z, self.block, self.m));
        Ok(row[z[self.block]] - log_sum_exp(row))
    }
}

/// Exact Gibbs update of one position.
#[derive(Debug, Clone, Copy)]
pub struct ExactKernel<'a, T> {
    pub target: &'a T,
    pub block: usize,
}

impl<T: Discrete> BlockKernel<Vec<usize>> for ExactKernel<'_, T> {
    fn propose(&self, states: &[Vec<usize>], rng: &mut dyn RngCore, _want_grad: bool) -> Result<Proposal<Vec<usize>>> {
        let mut out = Vec::with_capacity(states.len());
        let mut log_q = Vec::with_capacity(states.len());
        let mut rev = Vec::with_capacity(states.len());
        for c in states {
            let p = conditional(self.target, c, self.block)?;
            let k = sample_categorical(&p, rng);
            rev.push(p[c[self.block]].ln());
            log_q.push(p[k].ln());
            let mut s = c.clone();
            s[self.block] = k;
            out.push(s);
        }
        Ok(Proposal { states: out, log_q, log_q_reverse: rev, score: None })
    }

    fn log_density(&self, z: &Vec<usize>) -> Result<f64> {
        Ok(conditional(self.target, z, self.block)?[z[self.block]].ln())
    }
}
