//! Point estimators of the means and their post-processing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelContext, PooledKde, Summation, TrainingSet};
use crate::prior::PriorSpec;
use crate::sample::{check_positive, Bandwidths, HeteroSample};
use crate::stats;
use crate::sure::{self, GridSpec, ScalarGridSpec};

/// Either fixed tuning parameters or a SURE grid to select them from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuning<T, G> {
    Fixed(T),
    Sure(G),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// `mu_hat = x`.
    Naive,
    /// Exact posterior mean under a known prior.
    Oracle { prior: PriorSpec },
    /// Weighted two-dimensional kernel Tweedie rule.
    Nest { tuning: Tuning<Bandwidths, GridSpec> },
    /// Pooled one-dimensional Tweedie rule, bandwidth in x units.
    Tf { tuning: Tuning<f64, ScalarGridSpec> },
    /// Tweedie on standardized data `x / sigma`, rescaled by sigma.
    Scaled { tuning: Tuning<f64, ScalarGridSpec> },
    /// Pooled Tweedie within `k` sigma-quantile groups.
    KGroups { k: usize, tuning: Tuning<Vec<f64>, ScalarGridSpec> },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Naive => "Naive".into(),
            Method::Oracle { .. } => "Oracle".into(),
            Method::Nest { .. } => "NEST".into(),
            Method::Tf { .. } => "TF".into(),
            Method::Scaled { .. } => "Scaled".into(),
            Method::KGroups { k, .. } => format!("{k}-Groups"),
        }
    }

    pub fn nest_tuned() -> Self {
        Method::Nest {
            tuning: Tuning::Sure(GridSpec::default()),
        }
    }

    pub fn tf_tuned() -> Self {
        Method::Tf {
            tuning: Tuning::Sure(ScalarGridSpec::default()),
        }
    }

    pub fn scaled_tuned() -> Self {
        Method::Scaled {
            tuning: Tuning::Sure(ScalarGridSpec::default()),
        }
    }

    pub fn k_groups_tuned(k: usize) -> Self {
        Method::KGroups {
            k,
            tuning: Tuning::Sure(ScalarGridSpec::default()),
        }
    }

    fn set_seed(&mut self, seed: u64) {
        match self {
            Method::Nest { tuning: Tuning::Sure(g) } => g.seed = seed,
            Method::Tf { tuning: Tuning::Sure(g) }
            | Method::Scaled { tuning: Tuning::Sure(g) }
            | Method::KGroups {
                tuning: Tuning::Sure(g), ..
            } => g.seed = seed,
            _ => {}
        }
    }

    fn set_summation(&mut self, summation: Summation) {
        match self {
            Method::Nest { tuning: Tuning::Sure(g) } => g.summation = summation,
            Method::Tf { tuning: Tuning::Sure(g) }
            | Method::Scaled { tuning: Tuning::Sure(g) }
            | Method::KGroups {
                tuning: Tuning::Sure(g), ..
            } => g.summation = summation,
            _ => {}
        }
    }
}

/// Truncation bound `K log n` with `K = 2`.
pub fn default_truncation_bound(n: usize) -> f64 {
    2.0 * (n as f64).ln()
}

/// A method plus its post-processing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub method: Method,
    /// Clip estimates to `[-bound, bound]`.
    pub truncation_bound: Option<f64>,
    /// Zero estimates whose sign disagrees with the observation.
    pub stabilize_sign: bool,
    /// Leave observation `i` out of the density used to estimate `mu_i`.
    pub jackknife: bool,
    /// Kernel summation for estimation and tuning.
    #[serde(skip)]
    pub summation: Summation,
}

impl EstimatorSpec {
    pub fn new(method: Method) -> Self {
        EstimatorSpec {
            method,
            truncation_bound: None,
            stabilize_sign: false,
            jackknife: false,
            summation: Summation::Direct,
        }
    }

    pub fn truncated(mut self, bound: f64) -> Self {
        self.truncation_bound = Some(bound);
        self
    }

    pub fn sign_stabilized(mut self) -> Self {
        self.stabilize_sign = true;
        self
    }

    pub fn jackknifed(mut self) -> Self {
        self.jackknife = true;
        self
    }

    pub fn with_summation(mut self, summation: Summation) -> Self {
        self.summation = summation;
        self.method.set_summation(summation);
        self
    }

    /// Same spec with every SURE grid reseeded.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.method.set_seed(seed);
        self
    }

    pub fn name(&self) -> String {
        self.method.name()
    }
}

/// Bandwidths actually used by a fitted estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    None,
    Nest(Bandwidths),
    Scalar(f64),
    Groups { groups: Vec<Vec<usize>>, bandwidths: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mu_hat: Vec<f64>,
    pub fitted: Fitted,
    /// Number of estimates whose density hit the floor.
    pub floored: usize,
}

/// Runs `spec` on `sample`: tune if requested, estimate, then truncate and
/// stabilize signs in that order.
pub fn estimate(spec: &EstimatorSpec, sample: &HeteroSample) -> Result<Estimate> {
    let (x, sigma) = (sample.x(), sample.sigma());
    let mut est = match &spec.method {
        Method::Naive => Estimate {
            mu_hat: x.to_vec(),
            fitted: Fitted::None,
            floored: 0,
        },
        Method::Oracle { prior } => {
            prior.validate()?;
            Estimate {
                mu_hat: x.iter().zip(sigma).map(|(&xi, &si)| prior.posterior_mean(xi, si)).collect(),
                fitted: Fitted::None,
                floored: 0,
            }
        }
        Method::Nest { tuning } => {
            let bw = match tuning {
                Tuning::Fixed(bw) => *bw,
                Tuning::Sure(g) => {
                    let grid = g.resolve(sample)?.with_summation(spec.summation);
                    sure::tune(sample, &grid)?.argmin
                }
            };
            let (mu_hat, floored) = nest_estimates(sample, bw, spec.summation, spec.jackknife)?;
            Estimate {
                mu_hat,
                fitted: Fitted::Nest(bw),
                floored,
            }
        }
        Method::Tf { tuning } => {
            let h = match tuning {
                Tuning::Fixed(h) => *h,
                Tuning::Sure(g) => tune_tf(x, sigma, g, spec.summation)?,
            };
            let (mu_hat, floored) = tf_estimates(x, sigma, h, spec.summation, spec.jackknife)?;
            Estimate {
                mu_hat,
                fitted: Fitted::Scalar(h),
                floored,
            }
        }
        Method::Scaled { tuning } => {
            let h = match tuning {
                Tuning::Fixed(h) => *h,
                Tuning::Sure(g) => tune_scaled(x, sigma, g, spec.summation)?,
            };
            let (mu_hat, floored) = scaled_estimates(x, sigma, h, spec.summation, spec.jackknife)?;
            Estimate {
                mu_hat,
                fitted: Fitted::Scalar(h),
                floored,
            }
        }
        Method::KGroups { k, tuning } => k_groups_estimate(sample, *k, tuning, spec.summation, spec.jackknife)?,
    };
    if let Some(bound) = spec.truncation_bound {
        est.mu_hat = truncate_estimates(&est.mu_hat, bound)?;
    }
    if spec.stabilize_sign {
        est.mu_hat = stabilize_sign(x, &est.mu_hat);
    }
    Ok(est)
}

/// `x + sigma^2 f'/f` with the weighted kernel density at `(x, sigma)`.
pub fn nest_point(ctx: &KernelContext<'_>, x: f64, sigma: f64) -> Result<f64> {
    let d = ctx.density_eval(x, sigma)?;
    Ok(x + sigma * sigma * d.score())
}

fn nest_estimates(sample: &HeteroSample, bw: Bandwidths, summation: Summation, jackknife: bool) -> Result<(Vec<f64>, usize)> {
    let train = TrainingSet::from_sample(sample);
    let ctx = KernelContext::new(&train, bw)?.with_summation(summation);
    let leave_out = jackknife && sample.len() > 1;
    let evals: Vec<(f64, bool)> = (0..sample.len())
        .into_par_iter()
        .map(|i| {
            let (x, s) = (sample.x()[i], sample.sigma()[i]);
            let d = if leave_out {
                ctx.density_eval_excluding(x, s, i)
            } else {
                ctx.density_eval(x, s)
            }
            .map_err(|e| Error::at(i, e))?;
            Ok((x + s * s * d.score(), d.floored))
        })
        .collect::<Result<_>>()?;
    let floored = evals.iter().filter(|e| e.1).count();
    Ok((evals.into_iter().map(|e| e.0).collect(), floored))
}

/// Pooled Tweedie at one point: `x + sigma^2 f'(x)/f(x)` where `f` is the
/// fixed-bandwidth KDE of `train_x`.
pub fn tf_point(train_x: &[f64], h: f64, x: f64, sigma: f64) -> Result<f64> {
    check_positive("query sigma", sigma)?;
    let kde = PooledKde::new(train_x.to_vec(), h)?;
    Ok(x + sigma * sigma * kde.density_eval(x).score())
}

fn pooled_estimates(
    kde: &PooledKde,
    points: &[f64],
    multiplier: impl Fn(usize) -> f64 + Sync,
    jackknife: bool,
) -> Vec<(f64, bool)> {
    let leave_out = jackknife && points.len() > 1;
    points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let d = if leave_out {
                kde.density_eval_excluding(p, i)
            } else {
                kde.density_eval(p)
            };
            (p + multiplier(i) * d.score(), d.floored)
        })
        .collect()
}

fn tf_estimates(x: &[f64], sigma: &[f64], h: f64, summation: Summation, jackknife: bool) -> Result<(Vec<f64>, usize)> {
    let kde = PooledKde::new(x.to_vec(), h)?.with_summation(summation);
    let out = pooled_estimates(&kde, x, |i| sigma[i] * sigma[i], jackknife);
    let floored = out.iter().filter(|e| e.1).count();
    Ok((out.into_iter().map(|e| e.0).collect(), floored))
}

/// Standardized rule: `sigma * (z + f'(z)/f(z))` with `z = x / sigma` and `f`
/// the KDE of the standardized training points.
pub fn scaled_point(train: &HeteroSample, h: f64, x: f64, sigma: f64) -> Result<f64> {
    check_positive("query sigma", sigma)?;
    let z: Vec<f64> = train.x().iter().zip(train.sigma()).map(|(x, s)| x / s).collect();
    let kde = PooledKde::new(z, h)?;
    let zq = x / sigma;
    Ok(sigma * (zq + kde.density_eval(zq).score()))
}

fn scaled_estimates(x: &[f64], sigma: &[f64], h: f64, summation: Summation, jackknife: bool) -> Result<(Vec<f64>, usize)> {
    let z: Vec<f64> = x.iter().zip(sigma).map(|(x, s)| x / s).collect();
    let kde = PooledKde::new(z.clone(), h)?.with_summation(summation);
    let out = pooled_estimates(&kde, &z, |_| 1.0, jackknife);
    let floored = out.iter().filter(|e| e.1).count();
    Ok((out.into_iter().zip(sigma).map(|(e, s)| s * e.0).collect(), floored))
}

fn tune_tf(x: &[f64], sigma: &[f64], g: &ScalarGridSpec, summation: Summation) -> Result<f64> {
    let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let mut grid = g.resolve(stats::rms(sigma), x.len())?;
    grid.summation = summation;
    Ok(sure::tune_pooled(x, &var, &vec![1.0; x.len()], &grid)?.argmin)
}

fn tune_scaled(x: &[f64], sigma: &[f64], g: &ScalarGridSpec, summation: Summation) -> Result<f64> {
    let z: Vec<f64> = x.iter().zip(sigma).map(|(x, s)| x / s).collect();
    let scale: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let mut grid = g.resolve(1.0, x.len())?;
    grid.summation = summation;
    Ok(sure::tune_pooled(&z, &vec![1.0; x.len()], &scale, &grid)?.argmin)
}

/// Splits indices into `k` contiguous sigma-quantile blocks of near-equal
/// size (the first `n mod k` blocks get one extra). Ties in sigma keep
/// original index order.
pub fn k_groups_fit(sample: &HeteroSample, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = sample.len();
    if k < 1 || k > n {
        return Err(Error::BadGroupCount { n, k });
    }
    let sigma = sample.sigma();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]).then(a.cmp(&b)));
    let (base, extra) = (n / k, n % k);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let len = base + usize::from(g < extra);
        groups.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(groups)
}

fn k_groups_estimate(
    sample: &HeteroSample,
    k: usize,
    tuning: &Tuning<Vec<f64>, ScalarGridSpec>,
    summation: Summation,
    jackknife: bool,
) -> Result<Estimate> {
    let groups = k_groups_fit(sample, k)?;
    if let Tuning::Fixed(h) = tuning {
        if h.len() != groups.len() {
            return Err(Error::LengthMismatch {
                what: format!("{} bandwidths for {} groups", h.len(), groups.len()),
            });
        }
    }
    let mut mu_hat = vec![0.0; sample.len()];
    let mut bandwidths = Vec::with_capacity(groups.len());
    let mut floored = 0;
    for (g, idx) in groups.iter().enumerate() {
        let sub = sample.subset(idx);
        let h = match tuning {
            Tuning::Fixed(h) => h[g],
            Tuning::Sure(spec) => {
                // Each group is tuned on its own, with a group-specific seed.
                let spec = ScalarGridSpec {
                    seed: crate::rng::derive_seed(spec.seed, g as u64),
                    ..spec.clone()
                };
                tune_tf(sub.x(), sub.sigma(), &spec, summation)?
            }
        };
        let (est, fl) = tf_estimates(sub.x(), sub.sigma(), h, summation, jackknife)?;
        for (&i, e) in idx.iter().zip(est) {
            mu_hat[i] = e;
        }
        floored += fl;
        bandwidths.push(h);
    }
    Ok(Estimate {
        mu_hat,
        fitted: Fitted::Groups { groups, bandwidths },
        floored,
    })
}

/// Clips every estimate to `[-bound, bound]`.
pub fn truncate_estimates(mu_hat: &[f64], bound: f64) -> Result<Vec<f64>> {
    if !(bound > 0.0) {
        return Err(Error::InvalidBandwidth(format!("truncation bound {bound} must be positive")));
    }
    Ok(mu_hat.iter().map(|m| m.clamp(-bound, bound)).collect())
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Keeps `mu_hat[i]` only where its sign agrees with `x[i]`; `sign(0) = 0`.
pub fn stabilize_sign(x: &[f64], mu_hat: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), mu_hat.len(), "stabilize_sign needs equal lengths");
    x.iter()
        .zip(mu_hat)
        .map(|(&xi, &m)| if sign(xi) == sign(m) && sign(xi) != 0 { m } else { 0.0 })
        .collect()
}
