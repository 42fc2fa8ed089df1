use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_gamma, sample_normal, ExpFamParams, Family};
use crate::error::{argument, Result};
use crate::scalar::Scalar;

/// Counts below this are treated as an empty cluster and return the prior.
pub const EMPTY_CLUSTER_EPS: f64 = 1e-8;

/// Elementwise NormalGamma over `D` coordinates sharing one pseudo-count and
/// one shape: `τ_d ~ Gamma(α, β_d)`, `μ_d | τ_d ~ Normal(μ_d0, 1/(ν τ_d))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalGammaParams<S> {
    pub mu: Vec<S>,
    pub nu: S,
    pub alpha: S,
    pub beta: Vec<S>,
}

impl<S: Scalar> NormalGammaParams<S> {
    pub fn new(mu: Vec<S>, nu: S, alpha: S, beta: Vec<S>) -> Result<Self> {
        let p = Self { mu, nu, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    /// Same location and rate in every coordinate.
    pub fn isotropic(dim: usize, mu: S, nu: S, alpha: S, beta: S) -> Result<Self> {
        Self::new(vec![mu; dim], nu, alpha, vec![beta; dim])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.beta.len() || self.mu.is_empty() {
            return Err(argument("NormalGamma: mu and beta must have the same non-zero length"));
        }
        let ok = self.nu > S::zero()
            && self.alpha > S::zero()
            && self.beta.iter().all(|&b| b > S::zero() && b.is_finite())
            && self.mu.iter().all(|m| m.is_finite())
            && self.nu.is_finite()
            && self.alpha.is_finite();
        if ok {
            Ok(())
        } else {
            Err(argument(format!(
                "NormalGamma: invalid parameters nu={}, alpha={}, beta={:?}",
                self.nu, self.alpha, self.beta
            )))
        }
    }

    pub fn to_exp_fam(&self) -> Result<ExpFamParams<S>> {
        let canonical = (0..self.dim())
            .flat_map(|d| [self.mu[d], self.nu, self.alpha, self.beta[d]])
            .collect();
        ExpFamParams::from_canonical(Family::NormalGamma, canonical)
    }

    /// Inverse of [`to_exp_fam`](Self::to_exp_fam); requires ν and α to be
    /// shared by all coordinates.
    pub fn from_exp_fam(p: &ExpFamParams<S>) -> Result<Self> {
        if p.family() != Family::NormalGamma {
            return Err(argument("expected a NormalGamma"));
        }
        let c = p.canonical();
        let (nu, alpha) = (c[1], c[2]);
        if c.chunks(4).any(|q| q[1] != nu || q[2] != alpha) {
            return Err(argument("NormalGamma coordinates do not share nu and alpha"));
        }
        Self::new(c.chunks(4).map(|q| q[0]).collect(), nu, alpha, c.chunks(4).map(|q| q[3]).collect())
    }

    /// Joint log-density at means `mu` and precisions `tau`.
    pub fn log_prob(&self, mu: &[S], tau: &[S]) -> Result<S> {
        if mu.len() != self.dim() || tau.len() != self.dim() {
            return Err(argument("NormalGamma: value dimension mismatch"));
        }
        let mut lp = S::zero();
        for d in 0..self.dim() {
            lp += log_density_1d(self.mu[d], self.nu, self.alpha, self.beta[d], mu[d], tau[d])
                .map_err(|e| crate::error::domain("NormalGamma", e))?;
        }
        Ok(lp)
    }

    /// Returns `(mu, tau)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<S>, Vec<S>) {
        (0..self.dim())
            .map(|d| sample_1d(self.mu[d], self.nu, self.alpha, self.beta[d], rng))
            .unzip()
    }
}

pub(super) fn log_density_1d<S: Scalar>(
    mu0: S,
    nu: S,
    a: S,
    b: S,
    mu: S,
    tau: S,
) -> std::result::Result<S, String> {
    if !(tau > S::zero()) || !tau.is_finite() {
        return Err(format!("precision {tau} is not positive"));
    }
    let half = S::c(0.5);
    let dev = mu - mu0;
    Ok(a * b.ln() - a.lgamma() + (a - S::one()) * tau.ln() - b * tau + half * (nu * tau).ln()
        - half * S::ln_2pi()
        - half * nu * tau * dev * dev)
}

pub(super) fn sample_1d<S: Scalar, R: Rng + ?Sized>(mu0: S, nu: S, a: S, b: S, rng: &mut R) -> (S, S) {
    let tau = sample_gamma(a, b, rng);
    let mu = sample_normal(mu0, (nu * tau).sqrt().recip(), rng);
    (mu, tau)
}

/// Conjugate NormalGamma update from aggregated statistics of one cluster:
/// `count` = N_m, `sum1` = Σ x, `sum2` = Σ x² (per coordinate).
///
/// Counts below [`EMPTY_CLUSTER_EPS`] return the prior unchanged, which is
/// the `N_m → 0` limit of the update.
pub fn normal_gamma_posterior<S: Scalar>(
    prior: &NormalGammaParams<S>,
    count: S,
    sum1: &[S],
    sum2: &[S],
) -> Result<NormalGammaParams<S>> {
    if count < S::zero() || !count.is_finite() {
        return Err(argument(format!("cluster count must be non-negative, got {count}")));
    }
    if sum1.len() != prior.dim() || sum2.len() != prior.dim() {
        return Err(argument("statistic dimension does not match prior"));
    }
    if count < S::c(EMPTY_CLUSTER_EPS) {
        return Ok(prior.clone());
    }
    let half = S::c(0.5);
    let (nu0, a0) = (prior.nu, prior.alpha);
    let nu = nu0 + count;
    let alpha = a0 + half * count;
    let shrink = count * nu0 / (count + nu0);
    let mut mu = Vec::with_capacity(prior.dim());
    let mut beta = Vec::with_capacity(prior.dim());
    for d in 0..prior.dim() {
        let (m0, b0) = (prior.mu[d], prior.beta[d]);
        let mean = sum1[d] / count;
        let dev = mean - m0;
        mu.push((m0 * nu0 + sum1[d]) / nu);
        beta.push(b0 + half * (sum2[d] - sum1[d] * sum1[d] / count) + shrink * dev * dev * half);
    }
    NormalGammaParams::new(mu, nu, alpha, beta)
}
