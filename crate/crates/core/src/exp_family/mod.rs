//! Exponential-family distributions used by the models and proposals.
//!
//! Every distribution is stored as an [`ExpFamParams`]: a family tag, the
//! canonical parameters in a fixed per-family layout, and the natural
//! parameters derived from them. Layouts are per coordinate, coordinate-major:
//!
//! | family        | canonical per coordinate | natural per coordinate               | value layout            |
//! |---------------|--------------------------|--------------------------------------|-------------------------|
//! | `DiagNormal`  | `(μ, σ)`                 | `(μ/σ², −1/(2σ²))`                   | `D` reals               |
//! | `NormalGamma` | `(μ, ν, α, β)`           | `(α−½, −β−νμ²/2, νμ, −ν/2)`          | `[μ_1..μ_D, τ_1..τ_D]`  |
//! | `Gamma`       | `(α, β)` (rate β)        | `(α−1, −β)`                          | `D` positive reals      |
//! | `Beta`        | `(α, β)`                 | `(α−1, β−1)`                         | `D` reals in `(0,1)`    |
//! | `Bernoulli`   | `p`                      | `log(p/(1−p))`                       | `D` values in `{0,1}`   |
//! | `Categorical` | `(π_1..π_K)`             | `(log π_1..log π_K)`                 | one class index `0..K`  |
//!
//! Categorical classes are zero-based.

mod kl;
mod normal_gamma;

pub use kl::kl_divergence;
pub use normal_gamma::{normal_gamma_posterior, NormalGammaParams, EMPTY_CLUSTER_EPS};

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, Normal as NormalDist};
use serde::{Deserialize, Serialize};

use crate::error::{argument, domain, Result};
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    DiagNormal,
    NormalGamma,
    Gamma,
    Categorical,
    Beta,
    Bernoulli,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::DiagNormal => "DiagNormal",
            Family::NormalGamma => "NormalGamma",
            Family::Gamma => "Gamma",
            Family::Categorical => "Categorical",
            Family::Beta => "Beta",
            Family::Bernoulli => "Bernoulli",
        }
    }

    /// Canonical parameters per coordinate. `None` for `Categorical`, whose
    /// whole parameter vector is one coordinate.
    fn stride(self) -> Option<usize> {
        match self {
            Family::DiagNormal | Family::Gamma | Family::Beta => Some(2),
            Family::NormalGamma => Some(4),
            Family::Bernoulli => Some(1),
            Family::Categorical => None,
        }
    }
}

/// Canonical/natural parameter pair for one distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpFamParams<S: Scalar> {
    family: Family,
    canonical: Vec<S>,
    natural: Vec<S>,
}

impl<S: Scalar> ExpFamParams<S> {
    /// Validates `canonical` against the family constraints and caches the
    /// natural parameters.
    pub fn from_canonical(family: Family, canonical: Vec<S>) -> Result<Self> {
        validate(family, &canonical)?;
        let natural = canonical_to_natural(family, &canonical);
        Ok(Self { family, canonical, natural })
    }

    pub fn from_natural(family: Family, natural: &[S]) -> Result<Self> {
        let canonical = natural_to_canonical(family, natural)?;
        Self::from_canonical(family, canonical)
    }

    /// Diagonal normal. Scales of exactly zero are clamped to the smallest
    /// positive scalar.
    pub fn diag_normal(mean: &[S], std: &[S]) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(argument("mean and std lengths differ"));
        }
        let mut canonical = Vec::with_capacity(2 * mean.len());
        for (&m, &s) in mean.iter().zip(std) {
            let s = if s == S::zero() { S::min_positive_value() } else { s };
            canonical.extend([m, s]);
        }
        Self::from_canonical(Family::DiagNormal, canonical)
    }

    pub fn gamma(shape: &[S], rate: &[S]) -> Result<Self> {
        Self::pairs(Family::Gamma, shape, rate)
    }

    pub fn beta(alpha: &[S], beta: &[S]) -> Result<Self> {
        Self::pairs(Family::Beta, alpha, beta)
    }

    pub fn bernoulli(p: &[S]) -> Result<Self> {
        Self::from_canonical(Family::Bernoulli, p.to_vec())
    }

    pub fn categorical(probs: &[S]) -> Result<Self> {
        Self::from_canonical(Family::Categorical, probs.to_vec())
    }

    /// Categorical from unnormalised log-probabilities.
    pub fn categorical_from_logits(logits: &[S]) -> Result<Self> {
        Self::from_natural(Family::Categorical, logits)
    }

    fn pairs(family: Family, a: &[S], b: &[S]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(argument("parameter vectors differ in length"));
        }
        let canonical = a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect();
        Self::from_canonical(family, canonical)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn canonical(&self) -> &[S] {
        &self.canonical
    }

    pub fn natural(&self) -> &[S] {
        &self.natural
    }

    /// Number of coordinates (number of classes for `Categorical`).
    pub fn dim(&self) -> usize {
        match self.family.stride() {
            Some(k) => self.canonical.len() / k,
            None => self.canonical.len(),
        }
    }

    /// Exact log-density (log-mass for discrete families).
    pub fn log_prob(&self, value: &[S]) -> Result<S> {
        let fam = self.family.name();
        let c = &self.canonical;
        let half = S::c(0.5);
        match self.family {
            Family::DiagNormal => {
                self.check_len(value, self.dim())?;
                let mut lp = S::zero();
                for (d, &x) in value.iter().enumerate() {
                    let (m, s) = (c[2 * d], c[2 * d + 1]);
                    let z = (x - m) / s;
                    lp += -half * S::ln_2pi() - s.ln() - half * z * z;
                }
                Ok(lp)
            }
            Family::NormalGamma => {
                let dim = self.dim();
                self.check_len(value, 2 * dim)?;
                let mut lp = S::zero();
                for d in 0..dim {
                    let (mu0, nu, a, b) = (c[4 * d], c[4 * d + 1], c[4 * d + 2], c[4 * d + 3]);
                    lp += normal_gamma::log_density_1d(mu0, nu, a, b, value[d], value[dim + d])
                        .map_err(|e| domain(fam, e))?;
                }
                Ok(lp)
            }
            Family::Gamma => {
                self.check_len(value, self.dim())?;
                let mut lp = S::zero();
                for (d, &x) in value.iter().enumerate() {
                    if !(x > S::zero()) {
                        return Err(domain(fam, format!("{x} is not positive")));
                    }
                    let (a, b) = (c[2 * d], c[2 * d + 1]);
                    lp += a * b.ln() - a.lgamma() + (a - S::one()) * x.ln() - b * x;
                }
                Ok(lp)
            }
            Family::Beta => {
                self.check_len(value, self.dim())?;
                let mut lp = S::zero();
                for (d, &x) in value.iter().enumerate() {
                    if !(x > S::zero() && x < S::one()) {
                        return Err(domain(fam, format!("{x} is outside (0, 1)")));
                    }
                    let (a, b) = (c[2 * d], c[2 * d + 1]);
                    lp += (a - S::one()) * x.ln() + (b - S::one()) * (S::one() - x).ln()
                        - ln_beta_fn(a, b);
                }
                Ok(lp)
            }
            Family::Bernoulli => {
                self.check_len(value, self.dim())?;
                let mut lp = S::zero();
                for (d, &x) in value.iter().enumerate() {
                    let p = c[d];
                    lp += if x == S::one() {
                        p.ln()
                    } else if x == S::zero() {
                        (S::one() - p).ln()
                    } else {
                        return Err(domain(fam, format!("{x} is not 0 or 1")));
                    };
                }
                Ok(lp)
            }
            Family::Categorical => {
                self.check_len(value, 1)?;
                let k = class_index(value[0], c.len()).map_err(|e| domain(fam, e))?;
                Ok(c[k].ln())
            }
        }
    }

    /// Draws one value in the layout documented at module level.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        let c = &self.canonical;
        match self.family {
            Family::DiagNormal => (0..self.dim())
                .map(|d| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    c[2 * d] + c[2 * d + 1] * S::c(z)
                })
                .collect(),
            Family::NormalGamma => {
                let dim = self.dim();
                let mut out = vec![S::zero(); 2 * dim];
                for d in 0..dim {
                    let (mu0, nu, a, b) = (c[4 * d], c[4 * d + 1], c[4 * d + 2], c[4 * d + 3]);
                    let (m, t) = normal_gamma::sample_1d(mu0, nu, a, b, rng);
                    out[d] = m;
                    out[dim + d] = t;
                }
                out
            }
            Family::Gamma => (0..self.dim()).map(|d| sample_gamma(c[2 * d], c[2 * d + 1], rng)).collect(),
            Family::Beta => (0..self.dim())
                .map(|d| sample_beta(c[2 * d], c[2 * d + 1], rng))
                .collect(),
            Family::Bernoulli => (0..self.dim())
                .map(|d| if S::c(rng.gen::<f64>()) < c[d] { S::one() } else { S::zero() })
                .collect(),
            Family::Categorical => vec![S::c(sample_categorical(c, rng) as f64)],
        }
    }

    fn check_len(&self, value: &[S], want: usize) -> Result<()> {
        if value.len() != want {
            return Err(domain(
                self.family.name(),
                format!("expected {want} values, got {}", value.len()),
            ));
        }
        Ok(())
    }
}

impl<S: Scalar> ExpFamParams<S> {
    /// Sufficient statistics `T(value)` of one draw, laid out coordinate-major
    /// in the same order as the natural parameters, so that the log-density
    /// is `natural · T(value)` up to base measure and log-normaliser.
    pub fn sufficient_statistics(&self, value: &[S]) -> Result<Vec<S>> {
        // Validates the value against the support.
        self.log_prob(value)?;
        Ok(match self.family {
            Family::DiagNormal => value.iter().flat_map(|&x| [x, x * x]).collect(),
            Family::NormalGamma => {
                let dim = value.len() / 2;
                (0..dim)
                    .flat_map(|d| {
                        let (m, t) = (value[d], value[dim + d]);
                        [t.ln(), t, t * m, t * m * m]
                    })
                    .collect()
            }
            Family::Gamma => value.iter().flat_map(|&x| [x.ln(), x]).collect(),
            Family::Beta => value.iter().flat_map(|&x| [x.ln(), (S::one() - x).ln()]).collect(),
            Family::Bernoulli => value.to_vec(),
            Family::Categorical => {
                let mut out = vec![S::zero(); self.dim()];
                out[value[0].to_usize().unwrap_or(0)] = S::one();
                out
            }
        })
    }
}

/// Pointwise GMM statistics `{I[c=m], I[c=m]·x, I[c=m]·x²}` for one point.
///
/// Layout is three blocks of `M·D` entries (indicator, first moment, second
/// moment), each cluster-major: entry `m·D + d` of a block belongs to cluster
/// `m`, coordinate `d`. The indicator is repeated across coordinates so that
/// each block sums to per-coordinate counts.
pub fn assignment_statistics<S: Scalar>(x: &[S], cluster: usize, num_clusters: usize) -> Vec<S> {
    let dim = x.len();
    let block = num_clusters * dim;
    let mut out = vec![S::zero(); 3 * block];
    for (d, &v) in x.iter().enumerate() {
        let i = cluster * dim + d;
        out[i] = S::one();
        out[block + i] = v;
        out[2 * block + i] = v * v;
    }
    out
}

fn validate<S: Scalar>(family: Family, c: &[S]) -> Result<()> {
    let fam = family.name();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(argument(format!("{fam}: non-finite parameter")));
    }
    if let Some(k) = family.stride() {
        if c.is_empty() || c.len() % k != 0 {
            return Err(argument(format!("{fam}: parameter length {} not a multiple of {k}", c.len())));
        }
    }
    let positive = |v: S, what: &str| {
        if v > S::zero() {
            Ok(())
        } else {
            Err(argument(format!("{fam}: {what} must be positive, got {v}")))
        }
    };
    match family {
        Family::DiagNormal => c.chunks(2).try_for_each(|p| positive(p[1], "scale")),
        Family::NormalGamma => c.chunks(4).try_for_each(|p| {
            positive(p[1], "nu")?;
            positive(p[2], "alpha")?;
            positive(p[3], "beta")
        }),
        Family::Gamma | Family::Beta => c.chunks(2).try_for_each(|p| {
            positive(p[0], "alpha")?;
            positive(p[1], "beta")
        }),
        Family::Bernoulli => c.iter().try_for_each(|&p| {
            if p >= S::zero() && p <= S::one() {
                Ok(())
            } else {
                Err(argument(format!("Bernoulli: p = {p} outside [0, 1]")))
            }
        }),
        Family::Categorical => {
            if c.is_empty() || c.iter().any(|&p| p < S::zero()) {
                return Err(argument("Categorical: probabilities must be non-negative"));
            }
            let total = c.iter().fold(S::zero(), |a, &b| a + b);
            if (total - S::one()).abs() > S::c(1e-12) * S::c(c.len() as f64).max(S::one()) {
                return Err(argument(format!("Categorical: probabilities sum to {total}")));
            }
            Ok(())
        }
    }
}

fn canonical_to_natural<S: Scalar>(family: Family, c: &[S]) -> Vec<S> {
    let half = S::c(0.5);
    let one = S::one();
    match family {
        Family::DiagNormal => c
            .chunks(2)
            .flat_map(|p| {
                let prec = one / (p[1] * p[1]);
                [p[0] * prec, -half * prec]
            })
            .collect(),
        Family::NormalGamma => c
            .chunks(4)
            .flat_map(|p| {
                let (mu, nu, a, b) = (p[0], p[1], p[2], p[3]);
                [a - half, -b - half * nu * mu * mu, nu * mu, -half * nu]
            })
            .collect(),
        Family::Gamma => c.chunks(2).flat_map(|p| [p[0] - one, -p[1]]).collect(),
        Family::Beta => c.chunks(2).flat_map(|p| [p[0] - one, p[1] - one]).collect(),
        Family::Bernoulli => c.iter().map(|&p| (p / (one - p)).ln()).collect(),
        Family::Categorical => c.iter().map(|&p| p.ln()).collect(),
    }
}

fn natural_to_canonical<S: Scalar>(family: Family, n: &[S]) -> Result<Vec<S>> {
    let half = S::c(0.5);
    let one = S::one();
    let two = S::c(2.0);
    if let Some(k) = family.stride() {
        if n.is_empty() || n.len() % k != 0 {
            return Err(argument(format!("{}: natural length {}", family.name(), n.len())));
        }
    }
    Ok(match family {
        Family::DiagNormal => n
            .chunks(2)
            .flat_map(|p| {
                let var = -half / p[1];
                [p[0] * var, var.sqrt()]
            })
            .collect(),
        Family::NormalGamma => n
            .chunks(4)
            .flat_map(|p| {
                let nu = -two * p[3];
                let mu = p[2] / nu;
                [mu, nu, p[0] + half, -p[1] - half * nu * mu * mu]
            })
            .collect(),
        Family::Gamma => n.chunks(2).flat_map(|p| [p[0] + one, -p[1]]).collect(),
        Family::Beta => n.chunks(2).flat_map(|p| [p[0] + one, p[1] + one]).collect(),
        Family::Bernoulli => n.iter().map(|&t| one / (one + (-t).exp())).collect(),
        Family::Categorical => {
            let lse = log_sum_exp(n);
            n.iter().map(|&t| (t - lse).exp()).collect()
        }
    })
}

pub(crate) fn ln_beta_fn<S: Scalar>(a: S, b: S) -> S {
    a.lgamma() + b.lgamma() - (a + b).lgamma()
}

/// Gamma(shape, rate) draw. Backed by the Marsaglia–Tsang squeeze sampler,
/// which boosts shapes below one.
pub fn sample_gamma<S: Scalar, R: Rng + ?Sized>(shape: S, rate: S, rng: &mut R) -> S {
    let g = GammaDist::new(shape.f64(), 1.0 / rate.f64()).expect("validated gamma parameters");
    let x: f64 = g.sample(rng);
    S::c(x.max(f64::MIN_POSITIVE))
}

pub fn sample_normal<S: Scalar, R: Rng + ?Sized>(mean: S, std: S, rng: &mut R) -> S {
    let n = NormalDist::new(0.0, 1.0).expect("unit normal");
    mean + std * S::c(n.sample(rng))
}

/// Beta(a, b) draw as a ratio of Gamma draws, kept strictly inside (0, 1).
pub fn sample_beta<S: Scalar, R: Rng + ?Sized>(a: S, b: S, rng: &mut R) -> S {
    let x = sample_gamma(a, S::one(), rng);
    let y = sample_gamma(b, S::one(), rng);
    clamp_open_unit(x / (x + y))
}

/// Inverse-CDF categorical draw over (possibly unnormalised) probabilities.
pub fn sample_categorical<S: Scalar, R: Rng + ?Sized>(probs: &[S], rng: &mut R) -> usize {
    let total = probs.iter().fold(S::zero(), |a, &b| a + b);
    let u = S::c(rng.gen::<f64>()) * total;
    let mut acc = S::zero();
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > S::zero() {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last_positive
}

fn clamp_open_unit<S: Scalar>(x: S) -> S {
    let eps = S::epsilon();
    x.max(eps).min(S::one() - eps)
}

fn class_index<S: Scalar>(v: S, k: usize) -> std::result::Result<usize, String> {
    let idx = v.to_usize().filter(|&i| S::c(i as f64) == v && i < k);
    idx.ok_or_else(|| format!("{v} is not a class index below {k}"))
}
