//! Deep generative mixture: cluster centres `μ_m`, assignments `c_n`, and
//! one-dimensional embeddings `h_n ∈ (0, 1)` decoded by a learned network
//! `g_θ` into offsets from the assigned centre.
//!
//! Clusters and points are zero-based. The global block is `μ_{1:M}`; the
//! local block is `(c_{1:N}, h_{1:N})`.

mod kernels;
mod nets;

pub use kernels::{NeuralEncoder, NeuralGlobalKernel, NeuralLocalKernel, PriorEncoder, PriorGlobalKernel, PriorLocalKernel};
pub use nets::{neural_global_proposal, neural_local_proposal, DmmNets, GlobalProposal, LocalProposal};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Init, Mlp};
use crate::error::{domain, Error, Result};
use crate::exp_family::{sample_beta, sample_categorical, sample_normal};
use crate::gmm::{DIM, LN_2PI};
use crate::smc::Target;
use crate::{GradBuffer, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmmHyper {
    /// Prior mean of every centre coordinate.
    pub mu0: f64,
    pub sigma0: f64,
    /// Beta prior on the embeddings.
    pub alpha: f64,
    pub beta: f64,
    pub sigma_eps: f64,
    pub m: usize,
    /// Ring radius of the ground-truth decoder used by the generator.
    pub radius: f64,
}

impl Default for DmmHyper {
    fn default() -> Self {
        Self { mu0: 0.0, sigma0: 10.0, alpha: 1.0, beta: 1.0, sigma_eps: 0.1, m: 4, radius: 3.0 }
    }
}

impl DmmHyper {
    pub fn log_pi(&self) -> f64 {
        -(self.m as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.m > 0 && self.sigma0 > 0.0 && self.alpha > 0.0 && self.beta > 0.0 && self.sigma_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid DMM hyperparameters {self:?}")))
        }
    }

    pub(crate) fn log_beta_prior(&self, h: f64) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        (a - 1.0) * h.ln() + (b - 1.0) * (1.0 - h).ln() - crate::exp_family::ln_beta_fn(a, b)
    }

    pub(crate) fn log_mu_prior(&self, mu: &[f64; DIM]) -> f64 {
        let v = self.sigma0 * self.sigma0;
        mu.iter().map(|m| -0.5 * LN_2PI - 0.5 * v.ln() - 0.5 * (m - self.mu0).powi(2) / v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmmLatent {
    pub mu: Vec<[f64; DIM]>,
    pub c: Vec<usize>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmmInstance {
    pub points: Vec<[f64; DIM]>,
    /// Generating latent, kept for diagnostics only.
    pub truth: Option<DmmLatent>,
}

impl DmmInstance {
    pub fn new(points: Vec<[f64; DIM]>) -> Self {
        Self { points, truth: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean squared distance of the points from their centroid; the error of
    /// reconstructing every point by the instance mean.
    pub fn variance_baseline(&self) -> f64 {
        let n = self.len().max(1) as f64;
        let mut mean = [0.0; DIM];
        for p in &self.points {
            for d in 0..DIM {
                mean[d] += p[d] / n;
            }
        }
        self.points.iter().map(|p| (0..DIM).map(|d| (p[d] - mean[d]).powi(2)).sum::<f64>()).sum::<f64>() / n
    }
}

/// The generator's decoder: a circle of the given radius.
pub fn ring(h: f64, radius: f64) -> [f64; DIM] {
    let a = 2.0 * std::f64::consts::PI * h;
    [radius * a.cos(), radius * a.sin()]
}

/// Ancestral sample with the ring decoder standing in for `g_θ`.
pub fn generate_instance<R: Rng + ?Sized>(n: usize, hyper: &DmmHyper, rng: &mut R) -> Result<DmmInstance> {
    hyper.validate()?;
    if n == 0 {
        return Err(Error::Argument("instances need at least one point".into()));
    }
    let mu: Vec<[f64; DIM]> =
        (0..hyper.m).map(|_| [sample_normal(hyper.mu0, hyper.sigma0, rng), sample_normal(hyper.mu0, hyper.sigma0, rng)]).collect();
    let uniform = vec![1.0; hyper.m];
    let mut points = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    for _ in 0..n {
        let k = sample_categorical(&uniform, rng);
        let hn = sample_beta(hyper.alpha, hyper.beta, rng);
        let g = ring(hn, hyper.radius);
        points.push([
            g[0] + mu[k][0] + sample_normal(0.0, hyper.sigma_eps, rng),
            g[1] + mu[k][1] + sample_normal(0.0, hyper.sigma_eps, rng),
        ]);
        c.push(k);
        h.push(hn);
    }
    Ok(DmmInstance { points, truth: Some(DmmLatent { mu, c, h }) })
}

/// `g_θ : (0, 1) → R²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub net: Mlp,
}

impl Decoder {
    pub fn new() -> Self {
        Self { net: Mlp::from_spec("dec", 1, "FC. 32. Tanh. FC. 2.").expect("static architecture") }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: Init, rng: &mut R) -> Result<()> {
        self.net.init(store, init, rng)
    }

    /// Decodes a batch of embeddings into a `len×2` tensor.
    pub fn forward(&self, store: &ParamStore, h: &[f64]) -> Result<Tensor> {
        self.net.eval(store, &Tensor::column(h.to_vec()))
    }
}

impl Default for Decoder {
    fn default() -> Self {
        Self::new()
    }
}

fn check_latent(instance: &DmmInstance, z: &DmmLatent, hyper: &DmmHyper) -> Result<()> {
    if z.c.len() != instance.len() || z.h.len() != instance.len() || z.mu.len() != hyper.m {
        return Err(Error::Argument("latent does not fit the instance".into()));
    }
    if let Some(&k) = z.c.iter().find(|&&k| k >= hyper.m) {
        return Err(Error::Argument(format!("assignment {k} out of range")));
    }
    if let Some(&h) = z.h.iter().find(|&&h| !(h > 0.0 && h < 1.0)) {
        return Err(domain("Beta", format!("embedding {h} outside (0, 1)")));
    }
    Ok(())
}

/// `log p_θ(x, μ, c, h)` given the decoded offsets `g` (`N×2`).
fn log_joint_decoded(instance: &DmmInstance, z: &DmmLatent, g: &Tensor, hyper: &DmmHyper) -> f64 {
    let var = hyper.sigma_eps * hyper.sigma_eps;
    let mut lp: f64 = z.mu.iter().map(|m| hyper.log_mu_prior(m)).sum();
    for (i, x) in instance.points.iter().enumerate() {
        let mu = &z.mu[z.c[i]];
        lp += hyper.log_pi() + hyper.log_beta_prior(z.h[i]);
        for d in 0..DIM {
            lp += -0.5 * LN_2PI - 0.5 * var.ln() - 0.5 * (x[d] - g.get(i, d) - mu[d]).powi(2) / var;
        }
    }
    lp
}

pub fn log_joint(instance: &DmmInstance, z: &DmmLatent, decoder: &Decoder, theta: &ParamStore, hyper: &DmmHyper) -> Result<f64> {
    check_latent(instance, z, hyper)?;
    let g = decoder.forward(theta, &z.h)?;
    Ok(log_joint_decoded(instance, z, &g, hyper))
}

/// Mean over points of `‖x_n − (g_θ(h_n) + μ_{c_n})‖²`.
pub fn recon_mse(instance: &DmmInstance, z: &DmmLatent, decoder: &Decoder, theta: &ParamStore) -> Result<f64> {
    let g = decoder.forward(theta, &z.h)?;
    let mut total = 0.0;
    for (i, x) in instance.points.iter().enumerate() {
        let mu = z.mu.get(z.c[i]).ok_or_else(|| Error::Argument("assignment out of range".into()))?;
        total += (0..DIM).map(|d| (x[d] - g.get(i, d) - mu[d]).powi(2)).sum::<f64>();
    }
    Ok(total / instance.len().max(1) as f64)
}

/// `log p(x, μ, c, h)` with `h = sigmoid(u)` and the Jacobian `h(1−h)`
/// included, as a function of `q = (μ_{1:M} flattened, u_{1:N})` for fixed
/// `c`; returns the value and its gradient in `q`.
pub fn conditional_unconstrained(
    instance: &DmmInstance,
    c: &[usize],
    q: &[f64],
    decoder: &Decoder,
    theta: &ParamStore,
    hyper: &DmmHyper,
) -> Result<(f64, Vec<f64>)> {
    let (n, m) = (instance.len(), hyper.m);
    if q.len() != m * DIM + n || c.len() != n {
        return Err(Error::Argument("unconstrained vector does not fit the instance".into()));
    }
    let mut tape = Tape::new();
    let mu = tape.input(Tensor::from_vec(m, DIM, q[..m * DIM].to_vec()));
    let u = tape.input(Tensor::column(q[m * DIM..].to_vec()));
    let h = tape.sigmoid(u);
    let g = decoder.net.forward(&mut tape, theta, h)?;
    let mu_c = tape.select_rows(mu, c.to_vec());
    let x = tape.constant(Tensor::from_vec(n, DIM, instance.points.iter().flatten().copied().collect()));
    let pred = tape.add(g, mu_c);
    let resid = tape.sub(x, pred);
    let sq = tape.square(resid);
    let lik = tape.sum_all(sq);
    let lik = tape.scale(lik, -0.5 / (hyper.sigma_eps * hyper.sigma_eps));
    let dev = tape.offset(mu, -hyper.mu0);
    let dev2 = tape.square(dev);
    let prior = tape.sum_all(dev2);
    let prior = tape.scale(prior, -0.5 / (hyper.sigma0 * hyper.sigma0));
    // log Beta(h) + log h(1−h) = α log h + β log(1−h) + const
    let ln_h = tape.ln(h);
    let one_minus = tape.scale(h, -1.0);
    let one_minus = tape.offset(one_minus, 1.0);
    let ln_1mh = tape.ln(one_minus);
    let a = tape.scale(ln_h, hyper.alpha);
    let b = tape.scale(ln_1mh, hyper.beta);
    let hb = tape.add(a, b);
    let hb = tape.sum_all(hb);
    let s = tape.add(lik, prior);
    let total = tape.add(s, hb);
    let var = hyper.sigma_eps * hyper.sigma_eps;
    let constant = m as f64 * DIM as f64 * (-0.5 * LN_2PI - hyper.sigma0.ln())
        + n as f64 * (hyper.log_pi() - crate::exp_family::ln_beta_fn(hyper.alpha, hyper.beta))
        + n as f64 * DIM as f64 * (-0.5 * LN_2PI - 0.5 * var.ln());
    let value = tape.value(total).get(0, 0) + constant;
    tape.backward(total, &Tensor::scalar(1.0), None)?;
    let mut grad = tape.grad(mu).expect("input grad").data().to_vec();
    grad.extend_from_slice(tape.grad(u).expect("input grad").data());
    Ok((value, grad))
}

/// The DMM posterior for one instance, as an SMC target with learnable
/// decoder parameters θ.
#[derive(Debug, Clone, Copy)]
pub struct DmmModel<'a> {
    pub instance: &'a DmmInstance,
    pub hyper: &'a DmmHyper,
    pub decoder: &'a Decoder,
    pub theta: &'a ParamStore,
}

impl Target for DmmModel<'_> {
    type State = DmmLatent;

    fn log_joint(&self, z: &DmmLatent) -> Result<f64> {
        log_joint(self.instance, z, self.decoder, self.theta, self.hyper)
    }

    fn log_joints(&self, zs: &[DmmLatent]) -> Result<Vec<f64>> {
        let n = self.instance.len();
        let mut h = Vec::with_capacity(zs.len() * n);
        for z in zs {
            check_latent(self.instance, z, self.hyper)?;
            h.extend_from_slice(&z.h);
        }
        let g = self.decoder.forward(self.theta, &h)?;
        Ok(zs
            .iter()
            .enumerate()
            .map(|(l, z)| {
                let rows = Tensor::from_vec(n, DIM, g.data()[l * n * DIM..(l + 1) * n * DIM].to_vec());
                log_joint_decoded(self.instance, z, &rows, self.hyper)
            })
            .collect())
    }

    fn has_theta(&self) -> bool {
        true
    }

    fn theta_grad(&self, zs: &[DmmLatent], weights: &[f64], buf: &mut GradBuffer) -> Result<()> {
        let n = self.instance.len();
        let live: Vec<usize> = (0..zs.len()).filter(|&l| weights[l] > 0.0).collect();
        if live.is_empty() {
            return Ok(());
        }
        let rows = live.len() * n;
        let mut h = Vec::with_capacity(rows);
        let mut target = Vec::with_capacity(rows * DIM);
        let mut w = Vec::with_capacity(rows);
        for &l in &live {
            let z = &zs[l];
            for (i, x) in self.instance.points.iter().enumerate() {
                h.push(z.h[i]);
                let mu = &z.mu[z.c[i]];
                target.extend((0..DIM).map(|d| x[d] - mu[d]));
                w.push(weights[l]);
            }
        }
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::column(h));
        let g = self.decoder.net.forward(&mut tape, self.theta, hv)?;
        let t = tape.constant(Tensor::from_vec(rows, DIM, target));
        let r = tape.sub(t, g);
        let sq = tape.square(r);
        let per_row = tape.sum_cols(sq);
        let wv = tape.constant(Tensor::column(w));
        let weighted = tape.mul(per_row, wv);
        let total = tape.sum_all(weighted);
        let scale = -0.5 / (self.hyper.sigma_eps * self.hyper.sigma_eps);
        tape.backward(total, &Tensor::scalar(scale), Some(buf))
    }
}

#[cfg(test)]
mod tests;
