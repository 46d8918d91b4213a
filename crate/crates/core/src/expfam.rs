//! Tweedie posterior means for common one-parameter exponential families.
//!
//! For a density `f_theta(x | eta) = exp(eta x - psi(eta)) h_theta(x)` the
//! posterior mean of the natural parameter is `l'_f(x) - l'_h(x)`, where
//! `l_f` is the log marginal density and `l_h` the log carrier. The carrier
//! part is closed form per family ([`lh_prime`]); the marginal score is
//! supplied by the caller as a [`ScoreEstimate`].
//!
//! [`lh_prime`] and [`posterior_mean`] follow the published tables verbatim.
//! For Binomial and Negative Binomial those tables disagree with the
//! derivative of the log carrier: the Binomial carrier gives
//! `H_x - H_{n-x}` and the Negative Binomial carrier gives
//! `-(H_{x+r-1} - H_x)`. [`lh_prime_carrier`] and
//! [`posterior_mean_carrier`] implement the derivative-based values, which
//! are exact for conjugate priors when `l'_f` is the derivative of the
//! analytically continued marginal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelContext;

/// Euler-Mascheroni constant to 20 significant digits.
#[allow(clippy::excessive_precision)]
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_860_61;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Binomial { n_trials: u64 },
    NegBinomial { r: u64 },
    Gamma { alpha: f64 },
    /// Data coordinate is `z = ln x` for `x` in `(0, 1)`.
    Beta { beta: f64 },
}

/// A family with its known parameter and one observation in the family's
/// data coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyPoint {
    pub family: Family,
    pub value: f64,
}

/// Estimate of `l'_f(value)`, the derivative of the log marginal density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEstimate {
    pub lf1: f64,
}

impl ScoreEstimate {
    pub fn new(lf1: f64) -> Result<Self> {
        if lf1.is_finite() {
            Ok(ScoreEstimate { lf1 })
        } else {
            Err(Error::DomainError(format!("marginal score {lf1} is not finite")))
        }
    }
}

fn domain(msg: String) -> Error {
    Error::DomainError(msg)
}

fn as_count(value: f64, what: &str) -> Result<u64> {
    if value.is_finite() && value >= 0.0 && value.fract() == 0.0 && value <= u64::MAX as f64 {
        Ok(value as u64)
    } else {
        Err(domain(format!("{what} value {value} must be a nonnegative integer")))
    }
}

impl FamilyPoint {
    pub fn new(family: Family, value: f64) -> Result<Self> {
        let p = FamilyPoint { family, value };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.value;
        match self.family {
            Family::Binomial { n_trials } => {
                if n_trials < 1 {
                    return Err(domain("Binomial needs n_trials >= 1".into()));
                }
                if as_count(v, "Binomial")? > n_trials {
                    return Err(domain(format!("Binomial value {v} exceeds n_trials {n_trials}")));
                }
            }
            Family::NegBinomial { r } => {
                if r < 1 {
                    return Err(domain("NegBinomial needs r >= 1".into()));
                }
                as_count(v, "NegBinomial")?;
            }
            Family::Gamma { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(domain(format!("Gamma shape {alpha} must be positive")));
                }
                if !(v > 0.0 && v.is_finite()) {
                    return Err(domain(format!("Gamma value {v} must be positive")));
                }
            }
            Family::Beta { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(domain(format!("Beta parameter {beta} must be positive")));
                }
                if !(v < 0.0 && v.is_finite()) {
                    return Err(domain(format!("Beta log-coordinate {v} must be negative")));
                }
            }
        }
        Ok(())
    }
}

/// Sum of `1/k` for `k` in `lo..=hi` with Neumaier compensation, smallest
/// terms first; empty ranges give 0.
pub fn harmonic_range(lo: u64, hi: u64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut k = hi;
    while k >= lo.max(1) && k > 0 {
        let term = 1.0 / k as f64;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        k -= 1;
    }
    sum + comp
}

/// Harmonic number `H_x`.
pub fn harmonic(x: u64) -> f64 {
    harmonic_range(1, x)
}

/// `-l'_h(value)` as tabulated:
/// Binomial `H_x + H_{n-x} - 2 gamma`, Negative Binomial
/// `sum_{k=x+1}^{x+r-1} 1/k`, Gamma `(1 - alpha)/x`, Beta
/// `(beta - 1) x/(1 - x)` with `x = exp(value)`.
pub fn lh_prime(p: &FamilyPoint) -> Result<f64> {
    p.validate()?;
    Ok(match p.family {
        Family::Binomial { n_trials } => {
            let x = p.value as u64;
            harmonic(x) + harmonic(n_trials - x) - 2.0 * EULER_GAMMA
        }
        Family::NegBinomial { r } => {
            let x = p.value as u64;
            negbin_sum(x, r)
        }
        Family::Gamma { alpha } => (1.0 - alpha) / p.value,
        Family::Beta { beta } => beta_term(p.value, beta),
    })
}

fn negbin_sum(x: u64, r: u64) -> f64 {
    if r > 1 {
        harmonic_range(x + 1, x + r - 1)
    } else {
        0.0
    }
}

fn beta_term(z: f64, beta: f64) -> f64 {
    let x = z.exp();
    (beta - 1.0) * x / -z.exp_m1()
}

/// Tabulated posterior means: Binomial `E(log(p/(1-p)) | x) = lh_prime + lf1`,
/// Negative Binomial `E(log p | x) = lf1 + lh_prime`, Gamma
/// `E(beta | x) = (alpha - 1)/x - lf1`, Beta `E(alpha | z) = (beta - 1) x/(1 - x) + lf1`.
pub fn posterior_mean(p: &FamilyPoint, score: ScoreEstimate) -> Result<f64> {
    let s = ScoreEstimate::new(score.lf1)?.lf1;
    let lh = lh_prime(p)?;
    Ok(match p.family {
        Family::Binomial { .. } | Family::NegBinomial { .. } | Family::Beta { .. } => lh + s,
        Family::Gamma { alpha } => (alpha - 1.0) / p.value - s,
    })
}

/// `-l'_h(value)` from the derivative of the log carrier with digamma
/// differences written as harmonic sums: Binomial `H_x - H_{n-x}`, Negative
/// Binomial `-sum_{k=x+1}^{x+r-1} 1/k`; Gamma and Beta agree with [`lh_prime`].
pub fn lh_prime_carrier(p: &FamilyPoint) -> Result<f64> {
    p.validate()?;
    Ok(match p.family {
        Family::Binomial { n_trials } => {
            let x = p.value as u64;
            harmonic(x) - harmonic(n_trials - x)
        }
        Family::NegBinomial { r } => -negbin_sum(p.value as u64, r),
        _ => lh_prime(p)?,
    })
}

/// Posterior mean of the natural parameter using [`lh_prime_carrier`].
pub fn posterior_mean_carrier(p: &FamilyPoint, score: ScoreEstimate) -> Result<f64> {
    let s = ScoreEstimate::new(score.lf1)?.lf1;
    Ok(match p.family {
        Family::Gamma { .. } => posterior_mean(p, score)?,
        _ => lh_prime_carrier(p)? + s,
    })
}

/// Finite-difference surrogate for `l'_f` on an integer support `0..pmf.len()`:
/// central difference of the log pmf in the interior, one-sided at the edges.
pub fn discrete_lf1(pmf: &[f64], x: usize) -> Result<ScoreEstimate> {
    let n = pmf.len();
    if x >= n {
        return Err(domain(format!("support point {x} outside pmf of length {n}")));
    }
    let ln = |i: usize| -> Result<f64> {
        let p = pmf[i];
        if p > 0.0 && p.is_finite() {
            Ok(p.ln())
        } else {
            Err(Error::ZeroMass(i))
        }
    };
    if n < 2 {
        return Err(domain("pmf needs at least two support points".into()));
    }
    let lf1 = if x == 0 {
        ln(1)? - ln(0)?
    } else if x == n - 1 {
        ln(x)? - ln(x - 1)?
    } else {
        let (hi, lo) = (ln(x + 1)?, ln(x - 1)?);
        ln(x)?;
        0.5 * (hi - lo)
    };
    ScoreEstimate::new(lf1)
}

/// Kernel estimate of `l'_f` for a continuous family, with the family
/// parameter stored in the training set's sigma slot.
pub fn kde_lf1(ctx: &KernelContext<'_>, value: f64, theta: f64) -> Result<ScoreEstimate> {
    ScoreEstimate::new(ctx.density_eval(value, theta)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::digamma;

    fn pt(family: Family, value: f64) -> FamilyPoint {
        FamilyPoint::new(family, value).unwrap()
    }

    #[test]
    fn tabulated_examples() {
        let nb = pt(Family::NegBinomial { r: 1 }, 7.0);
        assert_eq!(lh_prime(&nb).unwrap(), 0.0);
        assert_eq!(lh_prime(&pt(Family::Gamma { alpha: 1.0 }, 3.3)).unwrap(), 0.0);
        let b = lh_prime(&pt(Family::Binomial { n_trials: 2 }, 1.0)).unwrap();
        assert!((b - (2.0 - 2.0 * 0.577_215_664_901_532_9)).abs() < 1e-15);
        assert!((b - 0.845_568_670_196_934_3).abs() < 1e-14);
        assert_eq!(lh_prime(&pt(Family::Binomial { n_trials: 3 }, 0.0)).unwrap(), harmonic(3) - 2.0 * EULER_GAMMA);
    }

    #[test]
    fn binomial_symmetry() {
        for n in 1..40u64 {
            for x in 0..=n {
                let a = lh_prime(&pt(Family::Binomial { n_trials: n }, x as f64)).unwrap();
                let b = lh_prime(&pt(Family::Binomial { n_trials: n }, (n - x) as f64)).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn negbin_recurrence() {
        for x in 0..30u64 {
            for r in 1..20u64 {
                let a = lh_prime(&pt(Family::NegBinomial { r }, x as f64)).unwrap();
                let b = lh_prime(&pt(Family::NegBinomial { r: r + 1 }, x as f64)).unwrap();
                assert!((b - a - 1.0 / (x + r) as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gamma_point_mass_recovery() {
        let beta0 = 1.7;
        for &x in &[0.01, 0.5, 1.0, 3.0, 40.0] {
            let m1 = posterior_mean(&pt(Family::Gamma { alpha: 1.0 }, x), ScoreEstimate::new(-beta0).unwrap()).unwrap();
            assert!((m1 - beta0).abs() < 1e-12);
            let m2 = posterior_mean(&pt(Family::Gamma { alpha: 2.0 }, x), ScoreEstimate::new(1.0 / x - beta0).unwrap()).unwrap();
            assert!((m2 - beta0).abs() < 1e-12);
        }
        let m = posterior_mean(&pt(Family::Gamma { alpha: 2.0 }, 1.0), ScoreEstimate::new(-0.5).unwrap()).unwrap();
        assert!((m - 1.5).abs() < 1e-15);
    }

    #[test]
    fn beta_term_value() {
        let z = 0.25f64.ln();
        let v = lh_prime(&pt(Family::Beta { beta: 3.0 }, z)).unwrap();
        assert!((v - 2.0 * 0.25 / 0.75).abs() < 1e-15);
        let m = posterior_mean(&pt(Family::Beta { beta: 3.0 }, z), ScoreEstimate::new(0.4).unwrap()).unwrap();
        assert!((m - (v + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn harmonic_matches_digamma() {
        for &x in &[1u64, 2, 10, 1_000, 123_457, 1_000_000] {
            let oracle = digamma(x as f64 + 1.0) + EULER_GAMMA;
            assert!((harmonic(x) - oracle).abs() < 1e-12, "x = {x}");
        }
        assert_eq!(harmonic(0), 0.0);
        assert_eq!(harmonic_range(5, 4), 0.0);
    }

    #[test]
    fn domain_errors() {
        assert!(FamilyPoint::new(Family::Binomial { n_trials: 3 }, 4.0).is_err());
        assert!(FamilyPoint::new(Family::Binomial { n_trials: 3 }, 1.5).is_err());
        assert!(FamilyPoint::new(Family::NegBinomial { r: 0 }, 1.0).is_err());
        assert!(FamilyPoint::new(Family::Gamma { alpha: 1.0 }, 0.0).is_err());
        assert!(FamilyPoint::new(Family::Beta { beta: 1.0 }, 0.0).is_err());
        assert!(ScoreEstimate::new(f64::NAN).is_err());
    }

    #[test]
    fn discrete_score() {
        let uniform = vec![0.2; 5];
        for x in 0..5 {
            assert_eq!(discrete_lf1(&uniform, x).unwrap().lf1, 0.0);
        }
        let q: f64 = 0.6;
        let geo: Vec<f64> = (0..10).map(|k| 0.4 * q.powi(k)).collect();
        for x in 0..10 {
            assert!((discrete_lf1(&geo, x).unwrap().lf1 - q.ln()).abs() < 1e-12);
        }
        assert_eq!(discrete_lf1(&[0.5, 0.0, 0.5], 0), Err(Error::ZeroMass(1)));
    }

    /// `E(log(p/(1-p)) | x)` under the Beta(a + x, b + n - x) posterior by
    /// midpoint quadrature in `u = log(p/(1-p))`.
    fn logodds_quadrature(a: f64, b: f64) -> f64 {
        let (lo, hi, m) = (-40.0, 40.0, 400_000);
        let du = (hi - lo) / m as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..m {
            let u: f64 = lo + (i as f64 + 0.5) * du;
            // p^a (1-p)^b dp with p = logistic(u), dp = p(1-p) du
            let lp = -(-u).exp().ln_1p();
            let lq = -u.exp().ln_1p();
            let w = (a * lp + b * lq).exp();
            num += u * w;
            den += w;
        }
        num / den
    }

    #[test]
    fn binomial_carrier_form_matches_beta_posterior() {
        let (a, b, n) = (2.0, 3.0, 6u64);
        for x in 0..=n {
            let xf = x as f64;
            // Derivative of log B(a + x, b + n - x) - log C(n, x) in x, the
            // analytic continuation of the Beta-Binomial log marginal.
            let lf1 = digamma(a + xf) - digamma(b + (n - x) as f64) - digamma(xf + 1.0) + digamma((n - x) as f64 + 1.0);
            let p = pt(Family::Binomial { n_trials: n }, xf);
            let est = posterior_mean_carrier(&p, ScoreEstimate::new(lf1).unwrap()).unwrap();
            let quad = logodds_quadrature(a + xf, b + (n - x) as f64);
            assert!((est - quad).abs() < 1e-6, "x = {x}: {est} vs {quad}");
            let tab = posterior_mean(&p, ScoreEstimate::new(lf1).unwrap()).unwrap();
            if x != n - x {
                assert!((tab - quad).abs() > 1e-3);
            }
        }
    }

    #[test]
    fn negbin_carrier_form_matches_beta_posterior() {
        // x ~ NB(r, p) with pmf C(x+r-1, x) p^x (1-p)^r, prior p ~ Beta(a, b):
        // the posterior is Beta(a + x, b + r) and E(log p | x) = psi(a + x) - psi(a + b + x + r).
        let (a, b, r) = (1.5, 2.5, 4u64);
        for x in 0..8u64 {
            let xf = x as f64;
            let lf1 = digamma(a + xf) - digamma(a + b + xf + r as f64) + digamma(xf + r as f64) - digamma(xf + 1.0);
            let p = pt(Family::NegBinomial { r }, xf);
            let est = posterior_mean_carrier(&p, ScoreEstimate::new(lf1).unwrap()).unwrap();
            let exact = digamma(a + xf) - digamma(a + b + xf + r as f64);
            assert!((est - exact).abs() < 1e-12);
        }
    }
}
