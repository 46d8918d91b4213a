//! Selection bias among the most extreme observations.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorSpec, Method};
use crate::kernel::Summation;
use crate::prior::PriorSpec;
use crate::rng::{derive_seed, rng_stream};
use crate::sample::HeteroSample;
use crate::stats::{self, normal_pdf};
use crate::sure::{csv_err, fmt_f64};

/// Expected selection bias `E(X - mu | X > t) = sigma^2 f(t) / (1 - F(t))`
/// of the naive estimate, from the closed-form marginal at noise level `sigma`.
pub fn selection_bias_formula(t: f64, sigma: f64, prior: &PriorSpec) -> Result<f64> {
    prior.validate()?;
    let tail = prior.marginal_sf(t, sigma);
    if !(tail > 0.0) {
        return Err(Error::ZeroTailMass { t });
    }
    Ok(sigma * sigma * prior.marginal_pdf(t, sigma) / tail)
}

/// Monte Carlo mean with its standard error and the analytic target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCheck {
    pub mean: f64,
    pub se: f64,
    pub target: f64,
    /// Draws that met the selection condition.
    pub selected: usize,
}

impl McCheck {
    /// `|mean - target|` in standard errors.
    pub fn z(&self) -> f64 {
        (self.mean - self.target).abs() / self.se
    }
}

fn conditional_mc(
    prior: &PriorSpec,
    sigma: f64,
    t: f64,
    draws: usize,
    seed: u64,
    target: f64,
    value: impl Fn(f64, f64) -> f64,
) -> Result<McCheck> {
    if draws == 0 {
        return Err(Error::EmptyMonteCarlo);
    }
    let mut rng = rng_stream(seed, 0);
    let mut vals = Vec::new();
    for _ in 0..draws {
        let mu = prior.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = mu + sigma * z;
        if x > t {
            vals.push(value(x, mu));
        }
    }
    if vals.is_empty() {
        return Err(Error::ZeroTailMass { t });
    }
    Ok(McCheck {
        mean: stats::mean(&vals),
        se: stats::std_error(&vals),
        target,
        selected: vals.len(),
    })
}

/// Monte Carlo `E(X - mu | X > t)` against [`selection_bias_formula`].
pub fn selection_bias_mc(prior: &PriorSpec, sigma: f64, t: f64, draws: usize, seed: u64) -> Result<McCheck> {
    let target = selection_bias_formula(t, sigma, prior)?;
    conditional_mc(prior, sigma, t, draws, seed, target, |x, mu| x - mu)
}

/// Monte Carlo `E(f'(X)/f(X) | X > t)` with the exact marginal, against
/// `-f(t) / (1 - F(t))`. Multiplied by `sigma^2` this cancels the selection
/// bias of the naive estimate.
pub fn tweedie_correction_mc(prior: &PriorSpec, sigma: f64, t: f64, draws: usize, seed: u64) -> Result<McCheck> {
    let target = -selection_bias_formula(t, sigma, prior)? / (sigma * sigma);
    conditional_mc(prior, sigma, t, draws, seed, target, |x, _| prior.marginal_score(x, sigma))
}

/// Two-group designs with `sigma = 1` (probability 0.7) or `sigma = 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSetting {
    /// `mu ~ N(1, 0.5^2)` for both groups.
    SingleCenter,
    /// `mu ~ N(0, 0.5^2)` in the `sigma = 1` group and `N(5, 0.5^2)` in the
    /// `sigma = 3` group.
    TwoCenter,
}

impl BiasSetting {
    pub const P_GROUP1: f64 = 0.7;
    pub const SIGMA1: f64 = 1.0;
    pub const SIGMA2: f64 = 3.0;
    pub const TAU: f64 = 0.5;

    pub fn centers(&self) -> (f64, f64) {
        match self {
            BiasSetting::SingleCenter => (1.0, 1.0),
            BiasSetting::TwoCenter => (0.0, 5.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BiasSetting::SingleCenter => "single_center",
            BiasSetting::TwoCenter => "two_center",
        }
    }
}

impl std::str::FromStr for BiasSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_center" | "single-center" => Ok(BiasSetting::SingleCenter),
            "two" | "two_center" | "two-center" => Ok(BiasSetting::TwoCenter),
            other => Err(Error::InvalidScenario(format!("unknown bias setting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub setting: BiasSetting,
    pub n: usize,
    pub reps: usize,
    /// Number of smallest observations kept per replicate.
    pub select_k: usize,
    pub seed: u64,
}

impl BiasConfig {
    /// `n = 5000`, 200 replicates, 20 smallest.
    pub fn full(setting: BiasSetting, seed: u64) -> Self {
        BiasConfig {
            setting,
            n: 5000,
            reps: 200,
            select_k: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.reps < 1 || self.select_k < 1 || self.select_k > self.n {
            return Err(Error::InvalidScenario(format!("invalid bias experiment {self:?}")));
        }
        Ok(())
    }
}

/// Replicate `rep` of the two-group design.
pub fn draw_bias_sample(cfg: &BiasConfig, rep: u64) -> HeteroSample {
    let mut rng = rng_stream(cfg.seed, rep);
    let (c1, c2) = cfg.setting.centers();
    let (mut x, mut sigma, mut mu) = (Vec::with_capacity(cfg.n), Vec::with_capacity(cfg.n), Vec::with_capacity(cfg.n));
    for _ in 0..cfg.n {
        let g1 = rng.random::<f64>() < BiasSetting::P_GROUP1;
        let (center, sd) = if g1 {
            (c1, BiasSetting::SIGMA1)
        } else {
            (c2, BiasSetting::SIGMA2)
        };
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        let m = center + BiasSetting::TAU * a;
        mu.push(m);
        sigma.push(sd);
        x.push(m + sd * b);
    }
    HeteroSample::with_truth(x, sigma, mu).expect("simulated draws are valid")
}

/// Indices of the `k` smallest observations, ties broken by index.
pub fn smallest_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSeries {
    pub name: String,
    /// `mu_hat - mu` of the selected observations, replicate-major.
    pub diffs: Vec<f64>,
}

impl BiasSeries {
    pub fn mean(&self) -> f64 {
        stats::mean(&self.diffs)
    }

    pub fn se(&self) -> f64 {
        stats::std_error(&self.diffs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasExperimentResult {
    pub config: BiasConfig,
    pub series: Vec<BiasSeries>,
}

impl BiasExperimentResult {
    pub fn series(&self, name: &str) -> Option<&BiasSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    /// Columns `estimator,rep,diff`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "rep", "diff"]).map_err(csv_err)?;
        for s in &self.series {
            for (i, d) in s.diffs.iter().enumerate() {
                let rep = i / self.config.select_k;
                w.write_record([s.name.clone(), rep.to_string(), fmt_f64(*d)]).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Naive, TF and NEST with SURE-tuned bandwidths.
pub fn default_bias_estimators() -> Vec<EstimatorSpec> {
    vec![
        EstimatorSpec::new(Method::Naive),
        EstimatorSpec::new(Method::tf_tuned()).with_summation(Summation::Pruned),
        EstimatorSpec::new(Method::nest_tuned()).with_summation(Summation::Pruned),
    ]
}

/// Per replicate: draw, run every estimator and record `mu_hat - mu` on the
/// `select_k` smallest observations.
pub fn run_bias_experiment(cfg: &BiasConfig, estimators: &[EstimatorSpec]) -> Result<BiasExperimentResult> {
    cfg.validate()?;
    let per_rep: Vec<Vec<Vec<f64>>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let sample = draw_bias_sample(cfg, rep);
            let chosen = smallest_k(sample.x(), cfg.select_k);
            let mu = sample.mu_true().expect("simulated samples carry truth");
            let fold_seed = derive_seed(cfg.seed, rep);
            estimators
                .iter()
                .map(|spec| {
                    let est = estimate(&spec.clone().with_seed(fold_seed), &sample)?;
                    Ok(chosen.iter().map(|&i| est.mu_hat[i] - mu[i]).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()
                .map_err(|e| Error::InRep {
                    rep,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let series = estimators
        .iter()
        .enumerate()
        .map(|(j, spec)| BiasSeries {
            name: spec.name(),
            diffs: per_rep.iter().flat_map(|r| r[j].iter().copied()).collect(),
        })
        .collect();
    Ok(BiasExperimentResult { config: *cfg, series })
}

/// Tweedie shrinkage `sigma_g^2 f'(x)/f(x)` that a pooled rule applies on
/// two-group data with `mu ~ N(mu0, tau^2)`, group noise levels `sigma1`,
/// `sigma2`, group-1 share `p`, evaluated for an observation whose own noise
/// level is `sigma_g`.
pub fn tf_average_shrinkage(x: f64, mu0: f64, tau: f64, sigma1: f64, sigma2: f64, p: f64, sigma_g: f64) -> f64 {
    let v1 = tau.hypot(sigma1);
    let v2 = tau.hypot(sigma2);
    let a = p * normal_pdf(x - mu0, v1);
    let b = (1.0 - p) * normal_pdf(x - mu0, v2);
    let w = if a + b > 0.0 { a / (a + b) } else { p };
    (mu0 - x) * sigma_g * sigma_g * (w / (v1 * v1) + (1.0 - w) / (v2 * v2))
}

/// Two-component Gaussian mixture fitted by EM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoComponentFit {
    pub weight: f64,
    pub mean1: f64,
    pub sd1: f64,
    pub mean2: f64,
    pub sd2: f64,
    pub log_lik: f64,
}

impl TwoComponentFit {
    /// Ashman's `D = sqrt(2) |m1 - m2| / sqrt(s1^2 + s2^2)`.
    pub fn ashman_d(&self) -> f64 {
        std::f64::consts::SQRT_2 * (self.mean1 - self.mean2).abs() / (self.sd1 * self.sd1 + self.sd2 * self.sd2).sqrt()
    }

    pub fn minor_weight(&self) -> f64 {
        self.weight.min(1.0 - self.weight)
    }

    /// Separated modes (`D > 2`) that each carry at least `min_weight`.
    pub fn is_bimodal(&self, min_weight: f64) -> bool {
        self.ashman_d() > 2.0 && self.minor_weight() >= min_weight
    }
}

/// Maximum-likelihood two-component fit started from the lower and upper
/// quartile halves. Component variances are bounded below by
/// `1e-6 * var(data)`.
pub fn fit_two_components(data: &[f64], max_iter: usize) -> Result<TwoComponentFit> {
    let n = data.len();
    if n < 4 {
        return Err(Error::EmptyMonteCarlo);
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = n / 2;
    let total_var = stats::sample_sd(data).powi(2).max(f64::MIN_POSITIVE);
    let var_floor = 1e-6 * total_var;
    let (mut w, mut m1, mut m2): (f64, f64, f64) = (0.5, stats::mean(&sorted[..half]), stats::mean(&sorted[half..]));
    let mut v1 = stats::sample_sd(&sorted[..half]).powi(2).max(var_floor);
    let mut v2 = stats::sample_sd(&sorted[half..]).powi(2).max(var_floor);
    let mut resp = vec![0.0; n];
    let mut log_lik = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(data) {
            let la = w.ln() + stats::normal_ln_pdf(x - m1, v1.sqrt());
            let lb = (1.0 - w).ln() + stats::normal_ln_pdf(x - m2, v2.sqrt());
            let lse = stats::log_sum_exp(&[la, lb]);
            *r = (la - lse).exp();
            ll += lse;
        }
        let s1: f64 = resp.iter().sum();
        let s2 = n as f64 - s1;
        if s1 <= 0.0 || s2 <= 0.0 {
            break;
        }
        w = (s1 / n as f64).clamp(1e-12, 1.0 - 1e-12);
        m1 = resp.iter().zip(data).map(|(r, x)| r * x).sum::<f64>() / s1;
        m2 = resp.iter().zip(data).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / s2;
        v1 = (resp.iter().zip(data).map(|(r, x)| r * (x - m1).powi(2)).sum::<f64>() / s1).max(var_floor);
        v2 = (resp.iter().zip(data).map(|(r, x)| (1.0 - r) * (x - m2).powi(2)).sum::<f64>() / s2).max(var_floor);
        let converged = (ll - log_lik).abs() < 1e-10 * ll.abs().max(1.0);
        log_lik = ll;
        if converged {
            break;
        }
    }
    Ok(TwoComponentFit {
        weight: w,
        mean1: m1,
        sd1: v1.sqrt(),
        mean2: m2,
        sd2: v2.sqrt(),
        log_lik,
    })
}
