//! Neural proposals for the DMM.
//!
//! Global proposals map every point to features `s_n ∈ R⁸` and soft
//! assignments `t_n ∈ Δ^M`, aggregate `Σ_n s_n ⊗ t_n` and divide column `m`
//! by `Σ_n t_{n,m}`. A head network reads column `m` with the prior mean and
//! scale and emits the mean and log-variance of a diagonal Normal over
//! `μ_m`. Local proposals score each cluster from `(x_n, μ_m)` and draw
//! `h_n` from a Beta whose log-parameters come from `x_n − μ_{c_n}`.

use rand::Rng;

use super::{DmmHyper, DmmInstance};
use crate::diff::{Init, Mlp, Var};
use crate::error::Result;
use crate::exp_family::{sample_beta, sample_categorical, sample_normal};
use crate::gmm::{DIM, LN_2PI};
use crate::{ParamStore, Tape, Tensor};

/// Width of the per-point global feature `s_n`.
pub const FEATURES: usize = 8;

/// Columns whose total soft count is below this are replaced by zeros.
pub const EMPTY_COLUMN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DmmNets {
    pub m: usize,
    pub enc_s: Mlp,
    pub enc_t: Mlp,
    pub cond_s: Mlp,
    pub cond_t: Mlp,
    pub enc_mean: Mlp,
    pub enc_logvar: Mlp,
    pub cond_mean: Mlp,
    pub cond_logvar: Mlp,
    /// `T(x_n, μ_m)`.
    pub local: Mlp,
    /// `log α̃_n` and `log β̃_n` from `x_n − μ_{c_n}`.
    pub h_alpha: Mlp,
    pub h_beta: Mlp,
}

impl DmmNets {
    pub fn new(m: usize) -> Result<Self> {
        let s = format!("FC. 32. Tanh. FC. {FEATURES}.");
        let t = format!("FC. 32. Tanh. FC. {m}. Softmax.");
        let head = "FC. 32. Tanh. FC. 2.";
        let cond_in = DIM + m + 1;
        let head_in = FEATURES + 2 * DIM;
        Ok(Self {
            m,
            enc_s: Mlp::from_spec("enc_s", DIM, &s)?,
            enc_t: Mlp::from_spec("enc_t", DIM, &t)?,
            cond_s: Mlp::from_spec("cond_s", cond_in, &s)?,
            cond_t: Mlp::from_spec("cond_t", cond_in, &t)?,
            enc_mean: Mlp::from_spec("enc_mean", head_in, head)?,
            enc_logvar: Mlp::from_spec("enc_logvar", head_in, head)?,
            cond_mean: Mlp::from_spec("cond_mean", head_in, head)?,
            cond_logvar: Mlp::from_spec("cond_logvar", head_in, head)?,
            local: Mlp::from_spec("local", 2 * DIM, "FC. 32. Tanh. FC. 1.")?,
            h_alpha: Mlp::from_spec("h_alpha", DIM, "FC. 32. Tanh. FC. 1.")?,
            h_beta: Mlp::from_spec("h_beta", DIM, "FC. 32. Tanh. FC. 1.")?,
        })
    }

    /// Adds all proposal parameters; output layers start at zero so the
    /// first proposals are the prior.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.init_with(store, Init::ZeroLast, rng)
    }

    pub fn init_with<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: Init, rng: &mut R) -> Result<()> {
        for net in self.all() {
            net.init(store, init, rng)?;
        }
        Ok(())
    }

    pub fn all(&self) -> [&Mlp; 11] {
        [
            &self.enc_s,
            &self.enc_t,
            &self.cond_s,
            &self.cond_t,
            &self.enc_mean,
            &self.enc_logvar,
            &self.cond_mean,
            &self.cond_logvar,
            &self.local,
            &self.h_alpha,
            &self.h_beta,
        ]
    }
}

/// Diagonal Normal over `R` centre rows recorded on a tape; both nodes are
/// `R×2`.
#[derive(Debug, Clone, Copy)]
pub struct GaussVars {
    pub mean: Var,
    pub logvar: Var,
}

impl GaussVars {
    pub fn sample<R: Rng + ?Sized>(&self, tape: &Tape, rng: &mut R) -> Tensor {
        let (mean, lv) = (tape.value(self.mean), tape.value(self.logvar));
        let mut out = Tensor::zeros(mean.rows(), DIM);
        for r in 0..mean.rows() {
            for d in 0..DIM {
                out.set(r, d, sample_normal(mean.get(r, d), (0.5 * lv.get(r, d)).exp(), rng));
            }
        }
        out
    }

    /// Per-row log-density summed over coordinates, `R×1`.
    pub fn log_prob(&self, tape: &mut Tape, mu: &Tensor) -> Var {
        let x = tape.constant(mu.clone());
        let dev = tape.sub(x, self.mean);
        let dev2 = tape.square(dev);
        let neg = tape.scale(self.logvar, -1.0);
        let prec = tape.exp(neg);
        let quad = tape.mul(dev2, prec);
        let inner = tape.add(quad, self.logvar);
        let inner = tape.offset(inner, LN_2PI);
        let per = tape.scale(inner, -0.5);
        tape.sum_cols(per)
    }
}

/// Plain-value global proposal for one set of conditioning variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalProposal {
    pub mean: Vec<[f64; DIM]>,
    pub var: Vec<[f64; DIM]>,
    /// The normalized aggregation, one length-8 column per cluster.
    pub statistics: Vec<[f64; FEATURES]>,
}

/// Plain-value local proposal for one set of centres.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalProposal {
    /// Per-point assignment probabilities.
    pub pi: Vec<Vec<f64>>,
    /// Beta parameters for `h_n` given the assignment used to build them.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

fn points_tensor(instance: &DmmInstance) -> Tensor {
    Tensor::from_vec(instance.len(), DIM, instance.points.iter().flatten().copied().collect())
}

/// `(Σ_n t_n s_nᵀ) / Σ_n t_n` per group, with empty columns zeroed; the
/// result is `(G·M)×8`, group-major.
pub(crate) fn normalized_aggregation(tape: &mut Tape, s: Var, t: Var, groups: usize) -> Var {
    let rows = tape.shape(t).0;
    let ones = tape.constant(Tensor::filled(rows, 1, 1.0));
    let num = tape.segment_t_matmul(t, s, groups);
    let den = tape.segment_t_matmul(t, ones, groups);
    let mask = tape.value(den).map(|v| if v < EMPTY_COLUMN_EPS { 0.0 } else { 1.0 });
    let den = tape.clamp_min(den, EMPTY_COLUMN_EPS);
    let ratio = tape.div(num, den);
    let mask = tape.constant(mask);
    tape.mul(ratio, mask)
}

fn heads(tape: &mut Tape, store: &ParamStore, mean: &Mlp, logvar: &Mlp, agg: Var, hyper: &DmmHyper) -> Result<GaussVars> {
    let rows = tape.shape(agg).0;
    let mut prior = Tensor::zeros(rows, 2 * DIM);
    for r in 0..rows {
        for d in 0..DIM {
            prior.set(r, d, hyper.mu0);
            prior.set(r, DIM + d, hyper.sigma0);
        }
    }
    let prior = tape.constant(prior);
    let input = tape.concat_cols(&[agg, prior]);
    let mean = mean.forward(tape, store, input)?;
    let offset = logvar.forward(tape, store, input)?;
    let logvar = tape.offset(offset, (hyper.sigma0 * hyper.sigma0).ln());
    Ok(GaussVars { mean, logvar })
}

/// Encoder global proposal from the points alone; `M` rows.
pub(crate) fn encoder_globals(tape: &mut Tape, store: &ParamStore, nets: &DmmNets, instance: &DmmInstance, hyper: &DmmHyper) -> Result<(GaussVars, Var)> {
    let x = tape.constant(points_tensor(instance));
    let s = nets.enc_s.forward(tape, store, x)?;
    let t = nets.enc_t.forward(tape, store, x)?;
    let agg = normalized_aggregation(tape, s, t, 1);
    Ok((heads(tape, store, &nets.enc_mean, &nets.enc_logvar, agg, hyper)?, agg))
}

/// Conditional global proposal given `(c, h)` per particle; `L·M` rows.
pub(crate) fn conditional_globals(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &DmmNets,
    instance: &DmmInstance,
    locals: &[(&[usize], &[f64])],
    hyper: &DmmHyper,
) -> Result<(GaussVars, Var)> {
    let (n, m) = (instance.len(), hyper.m);
    let width = DIM + m + 1;
    let mut input = Tensor::zeros(locals.len() * n, width);
    for (l, (c, h)) in locals.iter().enumerate() {
        for (i, x) in instance.points.iter().enumerate() {
            let row = &mut input.data_mut()[(l * n + i) * width..(l * n + i + 1) * width];
            row[..DIM].copy_from_slice(x);
            row[DIM + c[i]] = 1.0;
            row[DIM + m] = h[i];
        }
    }
    let x = tape.constant(input);
    let s = nets.cond_s.forward(tape, store, x)?;
    let t = nets.cond_t.forward(tape, store, x)?;
    let agg = normalized_aggregation(tape, s, t, locals.len());
    Ok((heads(tape, store, &nets.cond_mean, &nets.cond_logvar, agg, hyper)?, agg))
}

/// Row-wise log-softmax of `log π + T(x_n, μ_m)` given one set of centres
/// per particle, `(L·N)×M`.
pub(crate) fn local_log_probs(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &DmmNets,
    instance: &DmmInstance,
    mus: &[&[[f64; DIM]]],
    hyper: &DmmHyper,
) -> Result<Var> {
    let (n, m) = (instance.len(), hyper.m);
    let rows = mus.len() * n * m;
    let mut input = Vec::with_capacity(rows * 2 * DIM);
    for mu in mus {
        for x in &instance.points {
            for centre in mu.iter() {
                input.extend_from_slice(x);
                input.extend_from_slice(centre);
            }
        }
    }
    let x = tape.constant(Tensor::from_vec(rows, 2 * DIM, input));
    let stat = nets.local.forward(tape, store, x)?;
    let logits = tape.reshape(stat, mus.len() * n, m);
    let logits = tape.offset(logits, hyper.log_pi());
    let lp = tape.log_softmax(logits);
    debug_assert!((0..mus.len() * n).all(|r| {
        let s: f64 = tape.value(lp).row_slice(r).iter().map(|v| v.exp()).sum();
        (s - 1.0).abs() < 1e-9
    }));
    Ok(lp)
}

/// `(log α̃, log β̃)` for each row of `x_n − μ_{c_n}`, both `rows×1`.
pub(crate) fn h_log_params(tape: &mut Tape, store: &ParamStore, nets: &DmmNets, offsets: Tensor) -> Result<(Var, Var)> {
    let x = tape.constant(offsets);
    Ok((nets.h_alpha.forward(tape, store, x)?, nets.h_beta.forward(tape, store, x)?))
}

/// `log Beta(h; α, β)` for every row, with `α, β` given in log space.
pub(crate) fn beta_log_prob(tape: &mut Tape, log_a: Var, log_b: Var, h: &[f64]) -> Var {
    let a = tape.exp(log_a);
    let b = tape.exp(log_b);
    debug_assert!(tape.value(a).data().iter().chain(tape.value(b).data()).all(|v| *v > 0.0));
    let ln_h = tape.constant(Tensor::column(h.iter().map(|v| v.ln()).collect()));
    let ln_1mh = tape.constant(Tensor::column(h.iter().map(|v| (1.0 - v).ln()).collect()));
    let am1 = tape.offset(a, -1.0);
    let bm1 = tape.offset(b, -1.0);
    let t1 = tape.mul(am1, ln_h);
    let t2 = tape.mul(bm1, ln_1mh);
    let ab = tape.add(a, b);
    let lg_a = tape.lgamma(a);
    let lg_b = tape.lgamma(b);
    let lg_ab = tape.lgamma(ab);
    let s = tape.add(t1, t2);
    let s = tape.add(s, lg_ab);
    let s = tape.sub(s, lg_a);
    tape.sub(s, lg_b)
}

/// `x_n − μ_{c_n}` for every particle and point.
pub(crate) fn offsets(instance: &DmmInstance, mus: &[&[[f64; DIM]]], cs: &[usize]) -> Tensor {
    let n = instance.len();
    let mut data = Vec::with_capacity(mus.len() * n * DIM);
    for (l, mu) in mus.iter().enumerate() {
        for (i, x) in instance.points.iter().enumerate() {
            let centre = mu[cs[l * n + i]];
            data.extend((0..DIM).map(|d| x[d] - centre[d]));
        }
    }
    Tensor::from_vec(mus.len() * n, DIM, data)
}

pub(crate) fn sample_rows<R: Rng + ?Sized>(log_probs: &Tensor, rng: &mut R) -> Vec<usize> {
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

pub(crate) fn sample_betas<R: Rng + ?Sized>(tape: &Tape, log_a: Var, log_b: Var, rng: &mut R) -> Vec<f64> {
    let (a, b) = (tape.value(log_a), tape.value(log_b));
    (0..a.rows()).map(|r| sample_beta(a.get(r, 0).exp(), b.get(r, 0).exp(), rng)).collect()
}

/// Neural `q(μ_m | x, c, h)`, or the encoder's `q(μ_m | x)` without
/// conditioning variables.
pub fn neural_global_proposal(
    instance: &DmmInstance,
    locals: Option<(&[usize], &[f64])>,
    store: &ParamStore,
    nets: &DmmNets,
    hyper: &DmmHyper,
) -> Result<GlobalProposal> {
    let mut tape = Tape::new();
    let (g, agg) = match locals {
        None => encoder_globals(&mut tape, store, nets, instance, hyper)?,
        Some(cl) => conditional_globals(&mut tape, store, nets, instance, &[cl], hyper)?,
    };
    let (mean, lv, agg) = (tape.value(g.mean), tape.value(g.logvar), tape.value(agg));
    Ok(GlobalProposal {
        mean: (0..hyper.m).map(|k| [mean.get(k, 0), mean.get(k, 1)]).collect(),
        var: (0..hyper.m).map(|k| [lv.get(k, 0).exp(), lv.get(k, 1).exp()]).collect(),
        statistics: (0..hyper.m).map(|k| std::array::from_fn(|j| agg.get(k, j))).collect(),
    })
}

/// Neural `q(c_n | x_n, μ)` and, for the given assignments,
/// `q(h_n | x_n, μ_{c_n})`.
pub fn neural_local_proposal(
    instance: &DmmInstance,
    mu: &[[f64; DIM]],
    c: &[usize],
    store: &ParamStore,
    nets: &DmmNets,
    hyper: &DmmHyper,
) -> Result<LocalProposal> {
    let mut tape = Tape::new();
    let lp = local_log_probs(&mut tape, store, nets, instance, &[mu], hyper)?;
    let (la, lb) = h_log_params(&mut tape, store, nets, offsets(instance, &[mu], c))?;
    let v = tape.value(lp);
    Ok(LocalProposal {
        pi: (0..instance.len()).map(|i| v.row_slice(i).iter().map(|x| x.exp()).collect()).collect(),
        alpha: tape.value(la).data().iter().map(|v| v.exp()).collect(),
        beta: tape.value(lb).data().iter().map(|v| v.exp()).collect(),
    })
}
