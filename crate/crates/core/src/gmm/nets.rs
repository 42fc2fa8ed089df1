//! Neural sufficient-statistic proposals for the GMM.
//!
//! Global proposals map every point to a feature `s_n ∈ R²` and a soft
//! assignment `t_n ∈ Δ^M`, aggregate `N_m = Σ t`, `x̃_m = Σ t s`,
//! `x̃²_m = Σ t s²`, and push the sums through the conjugate NormalGamma
//! update. Substituting `t_n = onehot(c_n)` and `s_n = x_n` recovers the
//! exact conditional. Local proposals add a per-cluster scalar statistic to
//! the prior logits.

use rand::Rng;

use super::{assignment_log_weights, exact_global_conditional, GmmHyper, GmmInstance, GmmLatent, DIM, LN_2PI};
use crate::diff::{Init, Mlp, Var};
use crate::error::Result;
use crate::exp_family::{kl_divergence, sample_gamma, sample_normal, NormalGammaParams};
use crate::scalar::log_sum_exp;
use crate::{ParamStore, Tape, Tensor};

/// Architectures of the GMM proposal networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmNets {
    pub m: usize,
    /// `T(x_n)` for the one-shot encoder.
    pub enc_s: Mlp,
    pub enc_t: Mlp,
    /// `T(x_n, c_n)` for the conditional global proposal.
    pub cond_s: Mlp,
    pub cond_t: Mlp,
    /// `T(x_n, μ_m, τ_m)` for the local proposal.
    pub local: Mlp,
}

impl GmmNets {
    pub fn new(m: usize) -> Result<Self> {
        let t_arch = format!("FC. {m}. Softmax.");
        Ok(Self {
            m,
            enc_s: Mlp::from_spec("enc_s", DIM, "FC. 2.")?,
            enc_t: Mlp::from_spec("enc_t", DIM, &t_arch)?,
            cond_s: Mlp::from_spec("cond_s", DIM + m, "FC. 2.")?,
            cond_t: Mlp::from_spec("cond_t", DIM + m, &t_arch)?,
            local: Mlp::from_spec("local", 3 * DIM, "FC. 32. Tanh. FC. 1.")?,
        })
    }

    /// Adds all proposal parameters to `store`. Output layers start at zero,
    /// so initial proposals sit close to the prior.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.init_with(store, Init::ZeroLast, rng)
    }

    pub fn init_with<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: Init, rng: &mut R) -> Result<()> {
        for net in self.all() {
            net.init(store, init, rng)?;
        }
        Ok(())
    }

    pub fn all(&self) -> [&Mlp; 5] {
        [&self.enc_s, &self.enc_t, &self.cond_s, &self.cond_t, &self.local]
    }
}

/// NormalGamma parameters of `R` cluster rows recorded on a tape: `alpha`
/// and `nu` are `R×1`, `mu` and `beta` are `R×2`.
#[derive(Debug, Clone, Copy)]
pub struct NgVars {
    pub alpha: Var,
    pub nu: Var,
    pub mu: Var,
    pub beta: Var,
}

impl NgVars {
    pub fn rows(&self, tape: &Tape) -> usize {
        tape.shape(self.alpha).0
    }

    /// Reads row `r` back as plain parameters.
    pub fn row(&self, tape: &Tape, r: usize) -> NormalGammaParams<f64> {
        NormalGammaParams {
            mu: tape.value(self.mu).row_slice(r).to_vec(),
            nu: tape.value(self.nu).get(r, 0),
            alpha: tape.value(self.alpha).get(r, 0),
            beta: tape.value(self.beta).row_slice(r).to_vec(),
        }
    }

    /// Draws `(μ, τ)` for every row, returned as two `R×2` tensors.
    pub fn sample<R: Rng + ?Sized>(&self, tape: &Tape, rng: &mut R) -> (Tensor, Tensor) {
        let rows = self.rows(tape);
        let mut mu = Tensor::zeros(rows, DIM);
        let mut tau = Tensor::zeros(rows, DIM);
        let (a, n, m, b) = (tape.value(self.alpha), tape.value(self.nu), tape.value(self.mu), tape.value(self.beta));
        for r in 0..rows {
            for d in 0..DIM {
                let t = sample_gamma(a.get(r, 0), b.get(r, d), rng);
                tau.set(r, d, t);
                mu.set(r, d, sample_normal(m.get(r, d), 1.0 / (n.get(r, 0) * t).sqrt(), rng));
            }
        }
        (mu, tau)
    }

    /// `log NG(μ, τ)` summed over coordinates, one `R×1` entry per row.
    pub fn log_prob(&self, tape: &mut Tape, mu: &Tensor, tau: &Tensor) -> Var {
        let ln_tau = tape.constant(tau.map(f64::ln));
        let tau_c = tape.constant(tau.clone());
        let mu_c = tape.constant(mu.clone());
        let ln_beta = tape.ln(self.beta);
        let a_ln_b = tape.mul(self.alpha, ln_beta);
        let a_half = tape.offset(self.alpha, -0.5);
        let shape_term = tape.mul(a_half, ln_tau);
        let rate_term = tape.mul(self.beta, tau_c);
        let dev = tape.sub(mu_c, self.mu);
        let dev2 = tape.square(dev);
        let scaled = tape.mul(dev2, tau_c);
        let quad = tape.mul(scaled, self.nu);
        let quad = tape.scale(quad, -0.5);
        let s1 = tape.add(a_ln_b, shape_term);
        let s2 = tape.sub(s1, rate_term);
        let per_coord = tape.add(s2, quad);
        let summed = tape.sum_cols(per_coord);
        let lg = tape.lgamma(self.alpha);
        let ln_nu = tape.ln(self.nu);
        let half_ln_nu = tape.scale(ln_nu, 0.5);
        let shared = tape.sub(half_ln_nu, lg);
        let shared = tape.offset(shared, -0.5 * LN_2PI);
        let shared = tape.scale(shared, DIM as f64);
        tape.add(summed, shared)
    }
}

/// Conjugate update from soft statistics. `t` is `(G·N)×M`, `s` is
/// `(G·N)×2`; the result has `G·M` rows ordered group-major.
///
/// The rate is evaluated as
/// `β₀ + ½x̃² − (x̃² + 2ν₀μ₀x̃ − ν₀μ₀²N)/(2(N+ν₀))`, an algebraic rearrangement
/// of the usual form that has no division by `N` and hence no special case
/// for empty clusters.
pub fn ng_from_statistics(tape: &mut Tape, t: Var, s: Var, groups: usize, hyper: &GmmHyper) -> NgVars {
    let rows = tape.shape(t).0;
    let ones = tape.constant(Tensor::filled(rows, 1, 1.0));
    let s2 = tape.square(s);
    let n = tape.segment_t_matmul(t, ones, groups);
    let x1 = tape.segment_t_matmul(t, s, groups);
    let x2 = tape.segment_t_matmul(t, s2, groups);
    let (mu0, nu0) = (hyper.mu0, hyper.nu0);
    let half_n = tape.scale(n, 0.5);
    let alpha = tape.offset(half_n, hyper.alpha0);
    let nu = tape.offset(n, nu0);
    let num_mu = tape.offset(x1, mu0 * nu0);
    let mu = tape.div(num_mu, nu);
    let x1sq = tape.square(x1);
    let mut num = x1sq;
    if mu0 != 0.0 {
        let lin = tape.scale(x1, 2.0 * nu0 * mu0);
        let cnt = tape.scale(n, nu0 * mu0 * mu0);
        let a = tape.add(num, lin);
        num = tape.sub(a, cnt);
    }
    let two_nu = tape.scale(nu, 2.0);
    let frac = tape.div(num, two_nu);
    let half_x2 = tape.scale(x2, 0.5);
    let diff = tape.sub(half_x2, frac);
    let beta = tape.offset(diff, hyper.beta0);
    // β̃ ≥ β₀ analytically; the clamp only absorbs rounding
    let beta = tape.clamp_min(beta, 1e-300);
    NgVars { alpha, nu, mu, beta }
}

fn points_tensor(instance: &GmmInstance) -> Tensor {
    Tensor::from_vec(instance.len(), DIM, instance.points.iter().flatten().copied().collect())
}

/// Encoder statistics from the points alone; `M` rows.
pub(crate) fn encoder_globals(tape: &mut Tape, store: &ParamStore, nets: &GmmNets, instance: &GmmInstance, hyper: &GmmHyper) -> Result<NgVars> {
    let x = tape.constant(points_tensor(instance));
    let s = nets.enc_s.forward(tape, store, x)?;
    let t = nets.enc_t.forward(tape, store, x)?;
    Ok(ng_from_statistics(tape, t, s, 1, hyper))
}

/// Conditional statistics given one assignment vector per particle;
/// `L·M` rows.
pub(crate) fn conditional_globals(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &GmmNets,
    instance: &GmmInstance,
    assignments: &[&[usize]],
    hyper: &GmmHyper,
) -> Result<NgVars> {
    let (n, m) = (instance.len(), hyper.m);
    let width = DIM + m;
    let mut input = Tensor::zeros(assignments.len() * n, width);
    for (l, c) in assignments.iter().enumerate() {
        for (i, x) in instance.points.iter().enumerate() {
            let row = &mut input.data_mut()[(l * n + i) * width..(l * n + i + 1) * width];
            row[..DIM].copy_from_slice(x);
            row[DIM + c[i]] = 1.0;
        }
    }
    let x = tape.constant(input);
    let s = nets.cond_s.forward(tape, store, x)?;
    let t = nets.cond_t.forward(tape, store, x)?;
    Ok(ng_from_statistics(tape, t, s, assignments.len(), hyper))
}

/// Local log-probabilities given one `(μ, τ)` per particle, as an
/// `(L·N)×M` node of row-wise log-softmax values.
pub(crate) fn local_log_probs(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &GmmNets,
    instance: &GmmInstance,
    globals: &[(&[[f64; DIM]], &[[f64; DIM]])],
    hyper: &GmmHyper,
) -> Result<Var> {
    let (n, m) = (instance.len(), hyper.m);
    let rows = globals.len() * n * m;
    let mut input = Vec::with_capacity(rows * 3 * DIM);
    for (mu, tau) in globals {
        for x in &instance.points {
            for k in 0..m {
                input.extend_from_slice(x);
                input.extend_from_slice(&mu[k]);
                input.extend_from_slice(&tau[k]);
            }
        }
    }
    let x = tape.constant(Tensor::from_vec(rows, 3 * DIM, input));
    let stat = nets.local.forward(tape, store, x)?;
    let logits = tape.reshape(stat, globals.len() * n, m);
    let logits = tape.offset(logits, hyper.log_pi());
    Ok(tape.log_softmax(logits))
}

/// Neural `q(μ_m, τ_m | x, c)`, or the encoder's `q(μ_m, τ_m | x)` when no
/// assignments are given.
pub fn neural_global_proposal(
    instance: &GmmInstance,
    c: Option<&[usize]>,
    store: &ParamStore,
    nets: &GmmNets,
    hyper: &GmmHyper,
) -> Result<Vec<NormalGammaParams<f64>>> {
    let mut tape = Tape::new();
    let ng = match c {
        None => encoder_globals(&mut tape, store, nets, instance, hyper)?,
        Some(c) => conditional_globals(&mut tape, store, nets, instance, &[c], hyper)?,
    };
    Ok((0..hyper.m).map(|r| ng.row(&tape, r)).collect())
}

/// Neural `q(c_n | x_n, μ, τ)` as probability rows.
pub fn neural_local_proposal(
    instance: &GmmInstance,
    mu: &[[f64; DIM]],
    tau: &[[f64; DIM]],
    store: &ParamStore,
    nets: &GmmNets,
    hyper: &GmmHyper,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let lp = local_log_probs(&mut tape, store, nets, instance, &[(mu, tau)], hyper)?;
    let v = tape.value(lp);
    Ok((0..instance.len()).map(|i| v.row_slice(i).iter().map(|x| x.exp()).collect()).collect())
}

/// Inclusive KL from the exact conditionals to the neural proposals at
/// `latent`: the global value is averaged over clusters, the local value
/// over points.
pub fn kl_to_exact(
    instance: &GmmInstance,
    latent: &GmmLatent,
    store: &ParamStore,
    nets: &GmmNets,
    hyper: &GmmHyper,
) -> Result<(f64, f64)> {
    let exact_g = exact_global_conditional(instance, &latent.c, hyper)?;
    let neural_g = neural_global_proposal(instance, Some(&latent.c), store, nets, hyper)?;
    let mut global = 0.0;
    for (p, q) in exact_g.iter().zip(&neural_g) {
        global += kl_divergence(&p.to_exp_fam()?, &q.to_exp_fam()?)?;
    }
    // local KL from log-probabilities, so underflowing probabilities stay finite
    let exact_rows = assignment_log_weights(instance, &latent.mu, &latent.tau, hyper);
    let mut tape = Tape::new();
    let neural = local_log_probs(&mut tape, store, nets, instance, &[(&latent.mu, &latent.tau)], hyper)?;
    let neural = tape.value(neural);
    let mut local = 0.0;
    for (i, row) in exact_rows.iter().enumerate() {
        let lse = log_sum_exp(row);
        for (k, &w) in row.iter().enumerate() {
            let lp = w - lse;
            let p = lp.exp();
            if p > 0.0 {
                local += p * (lp - neural.get(i, k));
            }
        }
    }
    Ok((global / hyper.m as f64, local / instance.len().max(1) as f64))
}
