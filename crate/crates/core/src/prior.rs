//! Closed-form priors on the means and their Gaussian-convolved marginals.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, normal_ln_pdf, normal_pdf, normal_sf};

/// Prior `g_mu` on the means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// `N(mean, tau^2)`.
    Normal { mean: f64, tau: f64 },
    /// Point mass at zero with probability `p0`, otherwise `N(mean, tau^2)`.
    SparseMix { p0: f64, mean: f64, tau: f64 },
    /// Point mass at `a` with probability `p0`, otherwise at `b`.
    TwoPoint { p0: f64, a: f64, b: f64 },
}

/// One Gaussian component `weight * N(mean, sd^2)` of a marginal density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    /// Prior spread of this component (0 for a point mass).
    pub tau: f64,
}

impl PriorSpec {
    pub fn normal(mean: f64, tau: f64) -> Result<Self> {
        let p = PriorSpec::Normal { mean, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn sparse_mix(p0: f64, mean: f64, tau: f64) -> Result<Self> {
        let p = PriorSpec::SparseMix { p0, mean, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn two_point(p0: f64, a: f64, b: f64) -> Result<Self> {
        let p = PriorSpec::TwoPoint { p0, a, b };
        p.validate()?;
        Ok(p)
    }

    /// Degenerate prior at `at`.
    pub fn point_mass(at: f64) -> Self {
        PriorSpec::TwoPoint { p0: 1.0, a: at, b: at }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = match *self {
            PriorSpec::Normal { mean, tau } => mean.is_finite() && tau.is_finite() && tau > 0.0,
            PriorSpec::SparseMix { p0, mean, tau } => prob(p0) && mean.is_finite() && tau.is_finite() && tau > 0.0,
            PriorSpec::TwoPoint { p0, a, b } => prob(p0) && a.is_finite() && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPrior(format!("{self:?}")))
        }
    }

    /// Mixture components of the prior.
    pub fn components(&self) -> Vec<Component> {
        match *self {
            PriorSpec::Normal { mean, tau } => vec![Component { weight: 1.0, mean, tau }],
            PriorSpec::SparseMix { p0, mean, tau } => vec![
                Component { weight: p0, mean: 0.0, tau: 0.0 },
                Component { weight: 1.0 - p0, mean, tau },
            ],
            PriorSpec::TwoPoint { p0, a, b } => vec![
                Component { weight: p0, mean: a, tau: 0.0 },
                Component { weight: 1.0 - p0, mean: b, tau: 0.0 },
            ],
        }
    }

    pub fn mean(&self) -> f64 {
        self.components().iter().map(|c| c.weight * c.mean).sum()
    }

    /// `var(mu)` in closed form.
    pub fn variance(&self) -> f64 {
        match *self {
            PriorSpec::Normal { tau, .. } => tau * tau,
            PriorSpec::SparseMix { p0, mean, tau } => {
                let p1 = 1.0 - p0;
                p1 * (tau * tau + mean * mean) - (p1 * mean).powi(2)
            }
            PriorSpec::TwoPoint { p0, a, b } => p0 * (1.0 - p0) * (b - a) * (b - a),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PriorSpec::Normal { mean, tau } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + tau * z
            }
            PriorSpec::SparseMix { p0, mean, tau } => {
                if rng.random::<f64>() < p0 {
                    0.0
                } else {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + tau * z
                }
            }
            PriorSpec::TwoPoint { p0, a, b } => {
                if rng.random::<f64>() < p0 {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Marginal density `f_sigma(x)`.
    pub fn marginal_pdf(&self, x: f64, sigma: f64) -> f64 {
        self.components()
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight * normal_pdf(x - c.mean, c.tau.hypot(sigma)))
            .sum()
    }

    /// Marginal derivative `f'_sigma(x)`.
    pub fn marginal_pdf_deriv(&self, x: f64, sigma: f64) -> f64 {
        self.components()
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| {
                let v = c.tau * c.tau + sigma * sigma;
                c.weight * normal_pdf(x - c.mean, v.sqrt()) * (c.mean - x) / v
            })
            .sum()
    }

    /// Marginal upper tail `P(X > t | sigma)`.
    pub fn marginal_sf(&self, t: f64, sigma: f64) -> f64 {
        self.components()
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight * normal_sf(t - c.mean, c.tau.hypot(sigma)))
            .sum()
    }

    /// Posterior probabilities of each component given `(x, sigma)`, computed
    /// in log space.
    fn component_posteriors(&self, x: f64, sigma: f64) -> Vec<(Component, f64)> {
        let comps: Vec<Component> = self.components().into_iter().filter(|c| c.weight > 0.0).collect();
        let logs: Vec<f64> = comps
            .iter()
            .map(|c| c.weight.ln() + normal_ln_pdf(x - c.mean, c.tau.hypot(sigma)))
            .collect();
        let norm = log_sum_exp(&logs);
        comps.into_iter().zip(logs).map(|(c, l)| (c, (l - norm).exp())).collect()
    }

    /// Exact posterior mean `E(mu | x, sigma)`.
    pub fn posterior_mean(&self, x: f64, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        self.component_posteriors(x, sigma)
            .into_iter()
            .map(|(c, p)| {
                let t2 = c.tau * c.tau;
                p * (t2 * x + s2 * c.mean) / (t2 + s2)
            })
            .sum()
    }

    /// Exact marginal score `f'_sigma(x) / f_sigma(x)`.
    pub fn marginal_score(&self, x: f64, sigma: f64) -> f64 {
        self.component_posteriors(x, sigma)
            .into_iter()
            .map(|(c, p)| p * (c.mean - x) / (c.tau * c.tau + sigma * sigma))
            .sum()
    }
}
