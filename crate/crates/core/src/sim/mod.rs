//! Simulation designs: priors, noise laws, variance-ratio calibration and
//! Monte Carlo MSE studies.

pub mod bias;

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorSpec, Method, Tuning};
use crate::kernel::Summation;
use crate::prior::PriorSpec;
use crate::rng::{derive_seed, rng_stream};
use crate::sample::HeteroSample;
use crate::stats;
use crate::sure::{csv_err, fmt_f64};

/// Lower end of the uniform noise law used throughout the simulations.
pub const SIGMA_LO: f64 = 0.1;

/// Distribution of the noise levels `sigma_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SigmaLaw {
    Uniform { lo: f64, hi: f64 },
    /// `s1` with probability `p1`, otherwise `s2`.
    TwoValue { s1: f64, s2: f64, p1: f64 },
}

impl SigmaLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SigmaLaw::Uniform { lo, hi } => lo > 0.0 && hi > lo && hi.is_finite(),
            SigmaLaw::TwoValue { s1, s2, p1 } => {
                s1 > 0.0 && s2 > 0.0 && s1.is_finite() && s2.is_finite() && (0.0..=1.0).contains(&p1)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScenario(format!("invalid sigma law {self:?}")))
        }
    }

    /// `E[sigma^2]`.
    pub fn second_moment(&self) -> f64 {
        match *self {
            SigmaLaw::Uniform { lo, hi } => (lo * lo + lo * hi + hi * hi) / 3.0,
            SigmaLaw::TwoValue { s1, s2, p1 } => p1 * s1 * s1 + (1.0 - p1) * s2 * s2,
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SigmaLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            SigmaLaw::TwoValue { s1, s2, p1 } => {
                if rng.random::<f64>() < p1 {
                    s1
                } else {
                    s2
                }
            }
        }
    }
}

/// Upper end `sigma_M` of `U[lo, sigma_M]` such that
/// `var(mu) / (var(mu) + E sigma^2)` equals `share`.
pub fn solve_sigma_m_with_lo(prior: &PriorSpec, share: f64, lo: f64) -> Result<f64> {
    prior.validate()?;
    if !(share > 0.0 && share < 1.0) {
        return Err(Error::InvalidScenario(format!("variance share {share} must lie in (0, 1)")));
    }
    let e_sigma2 = prior.variance() * (1.0 - share) / share;
    if !(e_sigma2 > lo * lo) {
        return Err(Error::NoFeasibleRoot { ratio: share });
    }
    // Positive root of hi^2 + lo hi + lo^2 - 3 E = 0.
    Ok((-lo + (12.0 * e_sigma2 - 3.0 * lo * lo).sqrt()) / 2.0)
}

/// [`solve_sigma_m_with_lo`] with `lo = 0.1`.
pub fn solve_sigma_m(prior: &PriorSpec, share: f64) -> Result<f64> {
    solve_sigma_m_with_lo(prior, share, SIGMA_LO)
}

/// How the upper noise level of `U[0.1, sigma_M]` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Calibration {
    /// `var(mu) / var(X)` in `(0, 1)`.
    Share(f64),
    /// `var(mu) / E[sigma^2]`, the labels used for table cells (e.g. 9.6).
    Label(f64),
    /// Explicit `sigma_M`.
    SigmaMax(f64),
}

impl Calibration {
    pub fn share(&self) -> Option<f64> {
        match *self {
            Calibration::Share(r) => Some(r),
            Calibration::Label(k) => Some(k / (1.0 + k)),
            Calibration::SigmaMax(_) => None,
        }
    }

    pub fn sigma_max(&self, prior: &PriorSpec) -> Result<f64> {
        match *self {
            Calibration::SigmaMax(m) => Ok(m),
            _ => {
                let r = self.share().expect("share exists for ratio calibrations");
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::InvalidScenario(format!("calibration {self:?} gives share {r}")));
                }
                solve_sigma_m(prior, r)
            }
        }
    }
}

/// The three mean priors of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// `mu ~ N(3, 1)`.
    Normal,
    /// 0.7 point mass at zero, otherwise `N(3, 0.3^2)`.
    Sparse,
    /// Half at 0, half at 3.
    TwoPoint,
}

impl Setting {
    pub fn prior(&self) -> PriorSpec {
        match self {
            Setting::Normal => PriorSpec::Normal { mean: 3.0, tau: 1.0 },
            Setting::Sparse => PriorSpec::SparseMix { p0: 0.7, mean: 3.0, tau: 0.3 },
            Setting::TwoPoint => PriorSpec::TwoPoint { p0: 0.5, a: 0.0, b: 3.0 },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Setting::Normal => "normal",
            Setting::Sparse => "sparse",
            Setting::TwoPoint => "two_point",
        }
    }

    /// Estimators compared in the study. Sign stabilization is applied to
    /// the Tweedie-type rules in the sparse setting only.
    pub fn estimators(&self) -> Vec<EstimatorSpec> {
        let stab = *self == Setting::Sparse;
        let tweedie = |m: Method| {
            let s = EstimatorSpec::new(m).with_summation(Summation::Pruned);
            if stab {
                s.sign_stabilized()
            } else {
                s
            }
        };
        vec![
            EstimatorSpec::new(Method::Naive),
            EstimatorSpec::new(Method::Oracle { prior: self.prior() }),
            tweedie(Method::nest_tuned()),
            tweedie(Method::tf_tuned()),
            tweedie(Method::scaled_tuned()),
            tweedie(Method::k_groups_tuned(2)),
        ]
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Setting::Normal),
            "sparse" => Ok(Setting::Sparse),
            "two_point" | "two-point" | "twopoint" => Ok(Setting::TwoPoint),
            other => Err(Error::InvalidScenario(format!("unknown setting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub id: String,
    pub prior: PriorSpec,
    pub sigma_law: SigmaLaw,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
}

impl SimScenario {
    pub fn new(id: impl Into<String>, prior: PriorSpec, sigma_law: SigmaLaw, n: usize, reps: usize, seed: u64) -> Result<Self> {
        let s = SimScenario {
            id: id.into(),
            prior,
            sigma_law,
            n,
            reps,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Scenario with `sigma ~ U[0.1, sigma_M]` and `sigma_M` from `calibration`.
    pub fn calibrated(setting: Setting, calibration: Calibration, n: usize, reps: usize, seed: u64) -> Result<Self> {
        let prior = setting.prior();
        let hi = calibration.sigma_max(&prior)?;
        let label = match calibration {
            Calibration::Share(r) => format!("share{r}"),
            Calibration::Label(k) => format!("ratio{k}"),
            Calibration::SigmaMax(m) => format!("sigmaM{m}"),
        };
        SimScenario::new(
            format!("{}-{label}-n{n}", setting.name()),
            prior,
            SigmaLaw::Uniform { lo: SIGMA_LO, hi },
            n,
            reps,
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.sigma_law.validate()?;
        if self.n < 1 {
            return Err(Error::InvalidScenario("n must be at least 1".into()));
        }
        if self.reps < 1 {
            return Err(Error::InvalidScenario("reps must be at least 1".into()));
        }
        Ok(())
    }

    /// Population `var(mu) / var(X)`.
    pub fn variance_share(&self) -> f64 {
        let v = self.prior.variance();
        v / (v + self.sigma_law.second_moment())
    }
}

/// Replicate `rep` of `s`: `mu_i` from the prior, `sigma_i` from the noise
/// law and `X_i ~ N(mu_i, sigma_i^2)`, deterministic in `(seed, rep)`.
pub fn draw_scenario(s: &SimScenario, rep: u64) -> HeteroSample {
    let mut rng = rng_stream(s.seed, rep);
    let (mut x, mut sigma, mut mu) = (Vec::with_capacity(s.n), Vec::with_capacity(s.n), Vec::with_capacity(s.n));
    for _ in 0..s.n {
        let m = s.prior.sample(&mut rng);
        let sd = s.sigma_law.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        mu.push(m);
        sigma.push(sd);
        x.push(m + sd * z);
    }
    HeteroSample::with_truth(x, sigma, mu).expect("simulated draws are valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub name: String,
    /// Per-replicate mean squared error, in replicate order.
    pub per_rep: Vec<f64>,
    pub mse: f64,
    /// Standard error of the across-replicate mean.
    pub se: f64,
}

impl MseRow {
    pub fn new(name: String, per_rep: Vec<f64>) -> Self {
        MseRow {
            name,
            mse: stats::mean(&per_rep),
            se: stats::std_error(&per_rep),
            per_rep,
        }
    }

    pub fn reps(&self) -> usize {
        self.per_rep.len()
    }
}

/// One-sided paired comparison of two estimators across replicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedComparison {
    /// Mean of `mse(a) - mse(b)`.
    pub mean_diff: f64,
    pub se: f64,
    /// Student-t confidence that `a` has smaller risk than `b`.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseTable {
    pub scenario_id: String,
    pub n: usize,
    pub rows: Vec<MseRow>,
}

impl MseTable {
    pub fn row(&self, name: &str) -> Option<&MseRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Paired comparison of rows `a` and `b`; `None` if either is missing.
    pub fn paired(&self, a: &str, b: &str) -> Option<PairedComparison> {
        let (ra, rb) = (self.row(a)?, self.row(b)?);
        Some(paired_comparison(&ra.per_rep, &rb.per_rep))
    }

    /// Columns `estimator,mse,se,n,reps,scenario`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "mse", "se", "n", "reps", "scenario"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                fmt_f64(r.mse),
                fmt_f64(r.se),
                self.n.to_string(),
                r.reps().to_string(),
                self.scenario_id.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Paired one-sided Student-t comparison of per-replicate losses.
pub fn paired_comparison(a: &[f64], b: &[f64]) -> PairedComparison {
    assert_eq!(a.len(), b.len(), "paired comparison needs equal replicate counts");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = stats::mean(&d);
    let se = stats::std_error(&d);
    let confidence = if d.len() < 2 {
        0.5
    } else if se == 0.0 {
        if mean_diff < 0.0 {
            1.0
        } else if mean_diff > 0.0 {
            0.0
        } else {
            0.5
        }
    } else {
        let t = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).expect("positive degrees of freedom");
        t.cdf(-mean_diff / se)
    };
    PairedComparison { mean_diff, se, confidence }
}

/// Progress callback invoked after each replicate with `(rep, per-estimator mse)`.
pub type RepObserver<'a> = &'a (dyn Fn(u64, &[f64]) + Sync);

/// Runs every estimator on `s.reps` independent replicates, retuning kernel
/// bandwidths inside each replicate with a replicate-specific fold seed.
pub fn run_mse_study(s: &SimScenario, estimators: &[EstimatorSpec]) -> Result<MseTable> {
    run_mse_study_observed(s, estimators, &|_, _| {})
}

pub fn run_mse_study_observed(s: &SimScenario, estimators: &[EstimatorSpec], observe: RepObserver<'_>) -> Result<MseTable> {
    s.validate()?;
    let per_rep: Vec<Vec<f64>> = (0..s.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let sample = draw_scenario(s, rep);
            let fold_seed = derive_seed(s.seed, rep);
            let losses = estimators
                .iter()
                .map(|spec| {
                    let est = estimate(&spec.clone().with_seed(fold_seed), &sample)?;
                    Ok(sample.mse(&est.mu_hat).expect("simulated samples carry truth"))
                })
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| Error::InRep {
                    rep,
                    source: Box::new(e),
                })?;
            observe(rep, &losses);
            Ok(losses)
        })
        .collect::<Result<_>>()?;
    let rows = estimators
        .iter()
        .enumerate()
        .map(|(j, spec)| MseRow::new(spec.name(), per_rep.iter().map(|r| r[j]).collect()))
        .collect();
    Ok(MseTable {
        scenario_id: s.id.clone(),
        n: s.n,
        rows,
    })
}

/// Smoke and full scales of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// `n = 1000`, 10 replicates.
    Smoke,
    /// `n = 5000`, 50 replicates.
    Full,
}

impl Profile {
    pub fn n(&self) -> usize {
        match self {
            Profile::Smoke => 1000,
            Profile::Full => 5000,
        }
    }

    pub fn reps(&self) -> usize {
        match self {
            Profile::Smoke => 10,
            Profile::Full => 50,
        }
    }
}

/// Whether a method needs a tuned bandwidth.
pub fn is_tuned(spec: &EstimatorSpec) -> bool {
    matches!(
        spec.method,
        Method::Nest { tuning: Tuning::Sure(_) }
            | Method::Tf { tuning: Tuning::Sure(_) }
            | Method::Scaled { tuning: Tuning::Sure(_) }
            | Method::KGroups {
                tuning: Tuning::Sure(_),
                ..
            }
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_m_examples() {
        let normal = Setting::Normal.prior();
        let m = solve_sigma_m(&normal, 0.5).unwrap();
        assert!((m - 1.680).abs() < 5e-4);
        let law = SigmaLaw::Uniform { lo: 0.1, hi: m };
        assert!((law.second_moment() - 1.0).abs() < 1e-12);

        let tp = Setting::TwoPoint.prior();
        let m = solve_sigma_m(&tp, 0.5).unwrap();
        assert!((SigmaLaw::Uniform { lo: 0.1, hi: m }.second_moment() - 2.25).abs() < 1e-12);
        assert!((m - 2.5466).abs() < 1e-4);
    }

    #[test]
    fn infeasible_ratio() {
        let normal = Setting::Normal.prior();
        assert_eq!(solve_sigma_m(&normal, 0.995), Err(Error::NoFeasibleRoot { ratio: 0.995 }));
        assert!(solve_sigma_m(&normal, 1.0).is_err());
        assert!(solve_sigma_m(&normal, 0.0).is_err());
    }

    #[test]
    fn label_calibration() {
        let s = SimScenario::calibrated(Setting::Normal, Calibration::Label(9.6), 10, 1, 0).unwrap();
        let e = s.sigma_law.second_moment();
        assert!((1.0 / e - 9.6).abs() < 1e-9);
        assert!((s.variance_share() - 9.6 / 10.6).abs() < 1e-12);
    }

    #[test]
    fn draws_are_deterministic_per_rep() {
        let s = SimScenario::calibrated(Setting::Sparse, Calibration::Share(0.75), 200, 3, 42).unwrap();
        assert_eq!(draw_scenario(&s, 1), draw_scenario(&s, 1));
        assert_ne!(draw_scenario(&s, 1).x(), draw_scenario(&s, 2).x());
    }

    #[test]
    fn normal_prior_mean_smoke() {
        let s = SimScenario::calibrated(Setting::Normal, Calibration::Share(0.9), 100_000, 1, 7).unwrap();
        let d = draw_scenario(&s, 0);
        let m = stats::mean(d.mu_true().unwrap());
        assert!((m - 3.0).abs() < 3.0 / (1e5f64).sqrt());
    }

    #[test]
    fn sparse_zero_fraction() {
        let n = 100_000;
        let s = SimScenario::calibrated(Setting::Sparse, Calibration::Share(0.9), n, 1, 9).unwrap();
        let d = draw_scenario(&s, 0);
        let zeros = d.mu_true().unwrap().iter().filter(|&&m| m == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.7).abs() < 3.0 * (0.21 / n as f64).sqrt());
    }

    #[test]
    fn paired_comparison_signs() {
        let a = [1.0, 1.1, 0.9, 1.05];
        let b = [2.0, 2.1, 1.8, 2.2];
        let c = paired_comparison(&a, &b);
        assert!(c.mean_diff < 0.0 && c.confidence > 0.99);
        let c = paired_comparison(&b, &a);
        assert!(c.confidence < 0.01);
    }

    #[test]
    fn study_runs_and_orders_oracle_first() {
        let s = SimScenario::calibrated(Setting::Normal, Calibration::Label(3.0), 300, 3, 5).unwrap();
        let specs = vec![
            EstimatorSpec::new(Method::Naive),
            EstimatorSpec::new(Method::Oracle { prior: s.prior }),
        ];
        let t = run_mse_study(&s, &specs).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].reps(), 3);
        assert!(t.row("Oracle").unwrap().mse < t.row("Naive").unwrap().mse);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("estimator,mse,se,n,reps,scenario\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
