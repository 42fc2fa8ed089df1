//! Two-dimensional Gaussian mixture with an elementwise NormalGamma prior on
//! cluster means and diagonal precisions.
//!
//! Clusters and points are zero-based. The global block holds `μ_{1:M}` and
//! `τ_{1:M}`, the local block holds the assignments `c_{1:N}`.

mod kernels;
mod nets;

pub use kernels::{
    GibbsGlobalKernel, GibbsLocalKernel, NeuralEncoder, NeuralGlobalKernel, NeuralLocalKernel, PriorEncoder,
    PriorGlobalKernel, PriorLocalKernel,
};
pub use nets::{kl_to_exact, neural_global_proposal, neural_local_proposal, ng_from_statistics, GmmNets, NgVars};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::exp_family::{normal_gamma_posterior, sample_categorical, NormalGammaParams};
use crate::scalar::log_sum_exp;
use crate::smc::Target;

/// Dimensionality of every point.
pub const DIM: usize = 2;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmHyper {
    pub mu0: f64,
    pub nu0: f64,
    pub alpha0: f64,
    pub beta0: f64,
    /// Number of clusters; the assignment prior is uniform over them.
    pub m: usize,
}

impl Default for GmmHyper {
    fn default() -> Self {
        Self { mu0: 0.0, nu0: 0.1, alpha0: 2.0, beta0: 2.0, m: 3 }
    }
}

impl GmmHyper {
    pub fn prior(&self) -> NormalGammaParams<f64> {
        NormalGammaParams::isotropic(DIM, self.mu0, self.nu0, self.alpha0, self.beta0).expect("valid hyperparameters")
    }

    pub fn log_pi(&self) -> f64 {
        -(self.m as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Argument("GMM needs at least one cluster".into()));
        }
        self.prior().validate()
    }

    /// `log NG(μ, τ)` for one coordinate under the prior.
    fn prior_1d(&self, mu: f64, tau: f64) -> f64 {
        let (a, b, nu) = (self.alpha0, self.beta0, self.nu0);
        let d = mu - self.mu0;
        a * b.ln() - crate::Scalar::lgamma(a) + (a - 0.5) * tau.ln() - b * tau + 0.5 * nu.ln()
            - 0.5 * LN_2PI
            - 0.5 * nu * tau * d * d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmLatent {
    pub mu: Vec<[f64; DIM]>,
    pub tau: Vec<[f64; DIM]>,
    pub c: Vec<usize>,
}

impl GmmLatent {
    pub fn num_clusters(&self) -> usize {
        self.mu.len()
    }

    /// Relabels clusters: new cluster `k` is old cluster `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        Self {
            mu: perm.iter().map(|&p| self.mu[p]).collect(),
            tau: perm.iter().map(|&p| self.tau[p]).collect(),
            c: self.c.iter().map(|&c| inverse[c]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmInstance {
    pub points: Vec<[f64; DIM]>,
    /// Generating latent, kept for diagnostics only.
    pub truth: Option<GmmLatent>,
}

impl GmmInstance {
    pub fn new(points: Vec<[f64; DIM]>) -> Self {
        Self { points, truth: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest Mahalanobis-style separation between true cluster means,
    /// measured in pooled standard deviations. `None` without ground truth.
    pub fn separation(&self) -> Option<f64> {
        let t = self.truth.as_ref()?;
        let mut best = f64::INFINITY;
        for i in 0..t.mu.len() {
            for j in i + 1..t.mu.len() {
                let d2: f64 = (0..DIM)
                    .map(|d| {
                        let var = 1.0 / t.tau[i][d] + 1.0 / t.tau[j][d];
                        (t.mu[i][d] - t.mu[j][d]).powi(2) / var
                    })
                    .sum();
                best = best.min(d2.sqrt());
            }
        }
        Some(best)
    }
}

/// Ancestral sample of `n` points from the model.
pub fn generate_instance<R: Rng + ?Sized>(n: usize, hyper: &GmmHyper, rng: &mut R) -> Result<GmmInstance> {
    hyper.validate()?;
    if n == 0 {
        return Err(Error::Argument("instances need at least one point".into()));
    }
    let prior = hyper.prior();
    let mut mu = Vec::with_capacity(hyper.m);
    let mut tau = Vec::with_capacity(hyper.m);
    for _ in 0..hyper.m {
        let (m, t) = prior.sample(rng);
        mu.push([m[0], m[1]]);
        tau.push([t[0], t[1]]);
    }
    let uniform = vec![1.0; hyper.m];
    let mut c = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let k = sample_categorical(&uniform, rng);
        let p = [0, 1].map(|d| crate::exp_family::sample_normal(mu[k][d], 1.0 / tau[k][d].sqrt(), rng));
        c.push(k);
        points.push(p);
    }
    Ok(GmmInstance { points, truth: Some(GmmLatent { mu, tau, c }) })
}

fn check_globals(mu: &[[f64; DIM]], tau: &[[f64; DIM]], hyper: &GmmHyper) -> Result<()> {
    if mu.len() != hyper.m || tau.len() != hyper.m {
        return Err(Error::Argument(format!("expected {} clusters, got {}/{}", hyper.m, mu.len(), tau.len())));
    }
    if let Some(t) = tau.iter().flatten().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(domain("NormalGamma", format!("precision {t} is not positive")));
    }
    Ok(())
}

/// `log N(x; μ, 1/τ)` summed over coordinates.
#[inline]
fn log_normal(x: &[f64; DIM], mu: &[f64; DIM], tau: &[f64; DIM]) -> f64 {
    (0..DIM).map(|d| 0.5 * tau[d].ln() - 0.5 * LN_2PI - 0.5 * tau[d] * (x[d] - mu[d]).powi(2)).sum()
}

fn log_prior_globals(mu: &[[f64; DIM]], tau: &[[f64; DIM]], hyper: &GmmHyper) -> f64 {
    mu.iter().zip(tau).map(|(m, t)| (0..DIM).map(|d| hyper.prior_1d(m[d], t[d])).sum::<f64>()).sum()
}

/// `log p(x, μ, τ, c)`.
pub fn log_joint(instance: &GmmInstance, latent: &GmmLatent, hyper: &GmmHyper) -> Result<f64> {
    check_globals(&latent.mu, &latent.tau, hyper)?;
    if latent.c.len() != instance.len() {
        return Err(Error::Argument("one assignment per point required".into()));
    }
    let mut lp = log_prior_globals(&latent.mu, &latent.tau, hyper);
    let log_pi = hyper.log_pi();
    for (x, &c) in instance.points.iter().zip(&latent.c) {
        if c >= hyper.m {
            return Err(domain("Categorical", format!("assignment {c} out of range")));
        }
        lp += log_pi + log_normal(x, &latent.mu[c], &latent.tau[c]);
    }
    Ok(lp)
}

/// Per-cluster `(N_m, Σ x, Σ x²)` from hard assignments.
pub fn cluster_statistics(instance: &GmmInstance, c: &[usize], m: usize) -> Vec<(f64, [f64; DIM], [f64; DIM])> {
    let mut stats = vec![(0.0, [0.0; DIM], [0.0; DIM]); m];
    for (x, &k) in instance.points.iter().zip(c) {
        let s = &mut stats[k];
        s.0 += 1.0;
        for d in 0..DIM {
            s.1[d] += x[d];
            s.2[d] += x[d] * x[d];
        }
    }
    stats
}

/// Exact `p(μ_m, τ_m | x, c)` for every cluster.
pub fn exact_global_conditional(instance: &GmmInstance, c: &[usize], hyper: &GmmHyper) -> Result<Vec<NormalGammaParams<f64>>> {
    if c.len() != instance.len() || c.iter().any(|&k| k >= hyper.m) {
        return Err(Error::Argument("assignments must index clusters, one per point".into()));
    }
    let prior = hyper.prior();
    cluster_statistics(instance, c, hyper.m)
        .iter()
        .map(|(n, s1, s2)| normal_gamma_posterior(&prior, *n, s1, s2))
        .collect()
}

/// Log of `π_m N(x_n; μ_m, 1/τ_m)` for every point and cluster.
pub fn assignment_log_weights(instance: &GmmInstance, mu: &[[f64; DIM]], tau: &[[f64; DIM]], hyper: &GmmHyper) -> Vec<Vec<f64>> {
    let log_pi = hyper.log_pi();
    instance
        .points
        .iter()
        .map(|x| (0..hyper.m).map(|k| log_pi + log_normal(x, &mu[k], &tau[k])).collect())
        .collect()
}

/// Exact `p(c_n | x_n, μ, τ)` for every point, as probability rows.
pub fn exact_local_conditional(instance: &GmmInstance, mu: &[[f64; DIM]], tau: &[[f64; DIM]], hyper: &GmmHyper) -> Result<Vec<Vec<f64>>> {
    check_globals(mu, tau, hyper)?;
    Ok(assignment_log_weights(instance, mu, tau, hyper)
        .into_iter()
        .map(|row| crate::scalar::softmax(&row))
        .collect())
}

/// As [`exact_local_conditional`], in log space so that vanishing
/// probabilities keep a finite log.
pub fn exact_local_log_conditional(instance: &GmmInstance, mu: &[[f64; DIM]], tau: &[[f64; DIM]], hyper: &GmmHyper) -> Result<Vec<Vec<f64>>> {
    check_globals(mu, tau, hyper)?;
    Ok(assignment_log_weights(instance, mu, tau, hyper)
        .into_iter()
        .map(|row| {
            let lse = log_sum_exp(&row);
            row.iter().map(|v| v - lse).collect()
        })
        .collect())
}

/// `log p(x, μ, τ)` with the assignments summed out.
pub fn marginal_log_joint(instance: &GmmInstance, mu: &[[f64; DIM]], tau: &[[f64; DIM]], hyper: &GmmHyper) -> Result<f64> {
    check_globals(mu, tau, hyper)?;
    let rows = assignment_log_weights(instance, mu, tau, hyper);
    Ok(log_prior_globals(mu, tau, hyper) + rows.iter().map(|r| log_sum_exp(r)).sum::<f64>())
}

/// Packs `(μ, log τ)` as `[μ_{1,1}, μ_{1,2}, …, μ_{M,2}, log τ_{1,1}, …]`.
pub fn pack_unconstrained(mu: &[[f64; DIM]], tau: &[[f64; DIM]]) -> Vec<f64> {
    mu.iter().flatten().copied().chain(tau.iter().flatten().map(|t| t.ln())).collect()
}

pub fn unpack_unconstrained(q: &[f64], m: usize) -> (Vec<[f64; DIM]>, Vec<[f64; DIM]>) {
    let mu = (0..m).map(|k| [q[2 * k], q[2 * k + 1]]).collect();
    let tau = (0..m).map(|k| [q[2 * m + 2 * k].exp(), q[2 * m + 2 * k + 1].exp()]).collect();
    (mu, tau)
}

/// Log density of `(μ, log τ)` under the assignment-marginal posterior,
/// including the `log τ` Jacobian, with its gradient.
pub fn marginal_unconstrained(instance: &GmmInstance, q: &[f64], hyper: &GmmHyper) -> (f64, Vec<f64>) {
    let m = hyper.m;
    let (mu, tau) = unpack_unconstrained(q, m);
    if tau.iter().flatten().any(|t| !(t.is_finite() && *t > 0.0)) {
        return (f64::NEG_INFINITY, vec![0.0; q.len()]);
    }
    let mut grad = vec![0.0; q.len()];
    let mut lp = 0.0;
    let (a, b, nu) = (hyper.alpha0, hyper.beta0, hyper.nu0);
    for k in 0..m {
        for d in 0..DIM {
            let (mk, tk) = (mu[k][d], tau[k][d]);
            // prior plus Jacobian τ
            lp += hyper.prior_1d(mk, tk) + tk.ln();
            let dev = mk - hyper.mu0;
            grad[2 * k + d] += -nu * tk * dev;
            grad[2 * m + 2 * k + d] += (a - 0.5) - b * tk - 0.5 * nu * tk * dev * dev + 1.0;
        }
    }
    let log_pi = hyper.log_pi();
    let mut row = vec![0.0; m];
    for x in &instance.points {
        for k in 0..m {
            row[k] = log_pi + log_normal(x, &mu[k], &tau[k]);
        }
        let lse = log_sum_exp(&row);
        lp += lse;
        for k in 0..m {
            let r = (row[k] - lse).exp();
            for d in 0..DIM {
                let diff = x[d] - mu[k][d];
                grad[2 * k + d] += r * tau[k][d] * diff;
                grad[2 * m + 2 * k + d] += r * (0.5 - 0.5 * tau[k][d] * diff * diff);
            }
        }
    }
    (lp, grad)
}

/// The GMM posterior for one instance, as an SMC target.
#[derive(Debug, Clone, Copy)]
pub struct GmmModel<'a> {
    pub instance: &'a GmmInstance,
    pub hyper: &'a GmmHyper,
}

impl<'a> GmmModel<'a> {
    pub fn new(instance: &'a GmmInstance, hyper: &'a GmmHyper) -> Self {
        Self { instance, hyper }
    }
}

impl Target for GmmModel<'_> {
    type State = GmmLatent;

    fn log_joint(&self, z: &GmmLatent) -> Result<f64> {
        log_joint(self.instance, z, self.hyper)
    }
}
