//! Cross-module invariants checked on random inputs.

use nest_core::estimators::{estimate, truncate_estimates, EstimatorSpec, Method, Tuning};
use nest_core::expfam::{lh_prime, posterior_mean, Family, FamilyPoint, ScoreEstimate};
use nest_core::io::{CsvTable, Dataset, GapData, GapRow};
use nest_core::kernel::{KernelContext, PooledKde, Summation, TrainingSet};
use nest_core::prior::PriorSpec;
use nest_core::sim::bias::{run_bias_experiment, selection_bias_mc, tweedie_correction_mc, BiasConfig, BiasSetting};
use nest_core::sim::{draw_scenario, run_mse_study, Calibration, Setting, SimScenario};
use nest_core::sure::{sure_compound_cv, tune, GridSpec, SureGrid};
use nest_core::{kfold_split, validate_sample, Bandwidths, HeteroSample};
use proptest::prelude::*;

fn points() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((-4.0f64..4.0, 0.2f64..2.0), 1..25)
}

fn training(pts: &[(f64, f64)]) -> TrainingSet {
    let (x, s): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
    TrainingSet::new(x, s).unwrap()
}

/// Composite Simpson rule over `[a, b]` with `m` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let h = (b - a) / m as f64;
    let inner: f64 = (1..m).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn fixed_nest(h_x: f64, h_sigma: f64) -> EstimatorSpec {
    EstimatorSpec::new(Method::Nest {
        tuning: Tuning::Fixed(Bandwidths::new(h_x, h_sigma).unwrap()),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_density_integrates_to_one(pts in points(), hx in 0.2f64..1.5, hs in 0.05f64..1.0, qs in 0.2f64..2.0) {
        let t = training(&pts);
        let ctx = KernelContext::new(&t, Bandwidths::new(hx, hs).unwrap()).unwrap();
        let smin = t.sigma().iter().copied().fold(f64::INFINITY, f64::min);
        let smax = t.sigma().iter().copied().fold(0.0, f64::max);
        let xmin = t.x().iter().copied().fold(f64::INFINITY, f64::min);
        let xmax = t.x().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = (xmin - 10.0 * hx * smax, xmax + 10.0 * hx * smax);
        let m = 2 * ((b - a) / (hx * smin / 16.0)).ceil() as usize;
        let total = simpson(|x| ctx.raw_moments(x, qs).unwrap().f, a, b, m);
        prop_assert!((total - 1.0).abs() < 1e-6, "integral {}", total);
    }

    #[test]
    fn derivatives_match_finite_differences(pts in points(), hx in 0.2f64..1.5, hs in 0.05f64..1.0, u in 0.0f64..1.0, qs in 0.2f64..2.0) {
        let t = training(&pts);
        let ctx = KernelContext::new(&t, Bandwidths::new(hx, hs).unwrap()).unwrap();
        let smin = t.sigma().iter().copied().fold(f64::INFINITY, f64::min);
        let xmin = t.x().iter().copied().fold(f64::INFINITY, f64::min);
        let xmax = t.x().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let x = xmin - hx + u * (xmax - xmin + 2.0 * hx);
        let d = 1e-5 * hx * smin;
        let at = |x: f64| ctx.raw_moments(x, qs).unwrap();
        let (c, lo, hi) = (at(x), at(x - d), at(x + d));
        let fd1 = (hi.f - lo.f) / (2.0 * d);
        let fd2 = (hi.f1 - lo.f1) / (2.0 * d);
        // Relative to the derivative, floored at a small fraction of its natural scale f/h.
        let scale = c.f / (hx * smin);
        prop_assert!((fd1 - c.f1).abs() < 1e-4 * c.f1.abs().max(1e-3 * scale), "f1 {} vs {}", c.f1, fd1);
        prop_assert!((fd2 - c.f2).abs() < 1e-4 * c.f2.abs().max(1e-3 * scale / (hx * smin)), "f2 {} vs {}", c.f2, fd2);
    }

    #[test]
    fn kernel_translation_equivariance(pts in points(), shift in -50.0f64..50.0, qx in -4.0f64..4.0, qs in 0.2f64..2.0) {
        let bw = Bandwidths::new(0.6, 0.4).unwrap();
        let t = training(&pts);
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, s)| (x + shift, s)).collect();
        let tm = training(&moved);
        let a = KernelContext::new(&t, bw).unwrap().raw_moments(qx, qs).unwrap();
        let b = KernelContext::new(&tm, bw).unwrap().raw_moments(qx + shift, qs).unwrap();
        // The shift moves every difference x - x_j by at most one rounding of |x| + |shift|.
        let u = 1e-13 * (1.0 + shift.abs());
        let inv_h = 1.0 / (0.6 * 0.2);
        prop_assert!((a.f - b.f).abs() <= 1e-12 * a.f + u * inv_h * inv_h);
        prop_assert!((a.f1 - b.f1).abs() <= 1e-12 * a.f1.abs() + u * inv_h.powi(3));
        prop_assert!((a.f2 - b.f2).abs() <= 1e-12 * a.f2.abs() + u * inv_h.powi(4));
    }

    #[test]
    fn homoscedastic_kernel_is_pooled_kde(xs in proptest::collection::vec(-4.0f64..4.0, 1..25), s in 0.2f64..2.0, hx in 0.2f64..1.5, qx in -4.0f64..4.0) {
        let t = TrainingSet::new(xs.clone(), vec![s; xs.len()]).unwrap();
        let ctx = KernelContext::new(&t, Bandwidths::new(hx, 0.3).unwrap()).unwrap();
        let a = ctx.raw_moments(qx, s).unwrap();
        let b = PooledKde::new(xs, hx * s).unwrap().raw_moments(qx, None);
        prop_assert!((a.f - b.f).abs() <= 1e-12 * b.f.max(1e-300));
        prop_assert!((a.f1 - b.f1).abs() <= 1e-12 * (b.f1.abs() + b.f / (hx * s)));
        prop_assert!((a.f2 - b.f2).abs() <= 1e-12 * (b.f2.abs() + b.f / (hx * s * hx * s)));
    }

    #[test]
    fn folds_partition_and_balance(n in 2usize..200, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 2 + ((n - 2) as f64 * k_frac) as usize;
        let f = kfold_split(n, k, seed).unwrap();
        let sizes = f.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = (0..k).flat_map(|j| f.holdout(j)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(kfold_split(n, k, seed).unwrap(), f);
    }

    #[test]
    fn validate_sample_is_pure(pts in proptest::collection::vec((-1e3f64..1e3, -1.0f64..5.0), 1..30)) {
        let (x, s): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        prop_assert_eq!(validate_sample(&x, &s, None), validate_sample(&x, &s, None));
    }

    #[test]
    fn nest_and_tf_shift_exactly(pts in points(), shift in -20.0f64..20.0) {
        let sample = HeteroSample::new(pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()).unwrap();
        let moved = HeteroSample::new(pts.iter().map(|p| p.0 + shift).collect(), sample.sigma().to_vec()).unwrap();
        for spec in [fixed_nest(0.7, 0.3), EstimatorSpec::new(Method::Tf { tuning: Tuning::Fixed(0.5) })] {
            let a = estimate(&spec, &sample).unwrap().mu_hat;
            let b = estimate(&spec, &moved).unwrap().mu_hat;
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((v - u - shift).abs() <= 1e-10 * (1.0 + u.abs() + shift.abs()), "{} {} {}", u, v, shift);
            }
        }
    }

    #[test]
    fn truncation_dominates(est in proptest::collection::vec(-100.0f64..100.0, 1..40), mu_u in proptest::collection::vec(-1.0f64..1.0, 40), bound in 0.1f64..30.0) {
        let clipped = truncate_estimates(&est, bound).unwrap();
        for ((d, c), u) in est.iter().zip(&clipped).zip(&mu_u) {
            let mu = u * bound;
            prop_assert!((c - mu).powi(2) <= (d - mu).powi(2));
        }
    }

    #[test]
    fn homoscedastic_nest_collapses_to_tf(xs in proptest::collection::vec(-4.0f64..4.0, 1..25), s in 0.2f64..2.0, hx in 0.2f64..1.5, hs in 0.01f64..3.0) {
        let sample = HeteroSample::new(xs.clone(), vec![s; xs.len()]).unwrap();
        let a = estimate(&fixed_nest(hx, hs), &sample).unwrap().mu_hat;
        let tf = EstimatorSpec::new(Method::Tf { tuning: Tuning::Fixed(hx * s) });
        let b = estimate(&tf, &sample).unwrap().mu_hat;
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-10, "{} vs {}", u, v);
        }
    }

    #[test]
    fn binomial_lh_prime_symmetry(n in 1u64..500, frac in 0.0f64..1.0) {
        let x = (frac * n as f64).floor() as u64;
        let p = |v: u64| FamilyPoint::new(Family::Binomial { n_trials: n }, v as f64).unwrap();
        prop_assert_eq!(lh_prime(&p(x)).unwrap(), lh_prime(&p(n - x)).unwrap());
    }

    #[test]
    fn gamma_point_mass_recovery(alpha in 0.1f64..20.0, beta0 in 0.05f64..10.0, x in 0.01f64..50.0) {
        // Marginal of x under a point-mass prior at beta0 is Gamma(alpha, beta0).
        let lf1 = (alpha - 1.0) / x - beta0;
        let p = FamilyPoint::new(Family::Gamma { alpha }, x).unwrap();
        let got = posterior_mean(&p, ScoreEstimate::new(lf1).unwrap()).unwrap();
        prop_assert!((got - beta0).abs() <= 1e-12 * beta0.max(alpha / x), "{} vs {}", got, beta0);
    }

    #[test]
    fn dataset_csv_round_trip(rows in proptest::collection::vec((any::<f64>(), 1e-300f64..1e300, any::<f64>(), "[a-z,\" ]{0,6}"), 1..20)) {
        let rows: Vec<_> = rows.into_iter().filter(|r| r.0.is_finite() && r.2.is_finite()).collect();
        prop_assume!(!rows.is_empty());
        let d = Dataset {
            ids: rows.iter().map(|r| r.3.clone()).collect(),
            sample: HeteroSample::with_truth(
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| r.2).collect(),
            ).unwrap(),
        };
        let extra: Vec<f64> = rows.iter().map(|r| r.0 * 0.5).collect();
        let mut buf = Vec::new();
        d.write_with(&[("est".into(), extra.clone())], &mut buf).unwrap();
        let back = Dataset::read(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &d);
        let t = CsvTable::read(buf.as_slice()).unwrap();
        let got = t.column_f64(t.require(&["est"]).unwrap()).unwrap();
        prop_assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), extra.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn gap_csv_round_trip(rows in proptest::collection::vec((any::<f64>(), 0.0f64..1e3), 1..20)) {
        let data = GapData {
            kept: rows.iter().enumerate().filter(|(_, r)| r.0.is_finite()).map(|(i, r)| GapRow { id: format!("s{i}"), x: r.0, s: r.1 }).collect(),
            filtered: vec![],
        };
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let t = CsvTable::read(buf.as_slice()).unwrap();
        let x = t.column_f64(1).unwrap();
        let s = t.column_f64(2).unwrap();
        for (r, (a, b)) in data.kept.iter().zip(x.iter().zip(&s)) {
            prop_assert_eq!(r.x.to_bits(), a.to_bits());
            prop_assert_eq!(r.s.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn study_and_tuning_csv_round_trip() {
    let s = SimScenario::calibrated(Setting::Normal, Calibration::Label(9.6), 120, 3, 2).unwrap();
    let specs = vec![
        EstimatorSpec::new(Method::Naive),
        EstimatorSpec::new(Method::nest_tuned()).with_summation(Summation::Pruned),
    ];
    let table = run_mse_study(&s, &specs).unwrap();
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let t = CsvTable::read(buf.as_slice()).unwrap();
    let mse = t.column_f64(1).unwrap();
    let se = t.column_f64(2).unwrap();
    for (i, row) in table.rows.iter().enumerate() {
        assert_eq!(t.rows[i][0], row.name);
        assert_eq!(mse[i].to_bits(), row.mse.to_bits());
        assert_eq!(se[i].to_bits(), row.se.to_bits());
        assert_eq!(t.rows[i][5], table.scenario_id);
    }

    let sample = draw_scenario(&s, 0);
    let grid = GridSpec::default().resolve(&sample).unwrap();
    let report = tune(&sample, &grid).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let t = CsvTable::read(buf.as_slice()).unwrap();
    let sv = t.column_f64(2).unwrap();
    for ((_, _, want), got) in report.cells().zip(&sv) {
        assert_eq!(want.unwrap_or(f64::NAN).to_bits(), got.to_bits());
    }

    let cfg = BiasConfig {
        setting: BiasSetting::TwoCenter,
        n: 150,
        reps: 2,
        select_k: 4,
        seed: 1,
    };
    let res = run_bias_experiment(&cfg, &[EstimatorSpec::new(Method::Naive)]).unwrap();
    let mut buf = Vec::new();
    res.write_csv(&mut buf).unwrap();
    let t = CsvTable::read(buf.as_slice()).unwrap();
    let d = t.column_f64(2).unwrap();
    assert_eq!(
        d.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        res.series[0].diffs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let s = SimScenario::calibrated(Setting::TwoPoint, Calibration::Label(9.2), 150, 4, 8).unwrap();
    let specs = Setting::TwoPoint.estimators();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let sample = draw_scenario(&s, 1);
            let grid = GridSpec::default().resolve(&sample).unwrap();
            (run_mse_study(&s, &specs).unwrap(), tune(&sample, &grid).unwrap())
        })
    };
    let (t1, r1) = run(1);
    let (t4, r4) = run(4);
    assert_eq!(t1, t4);
    assert_eq!(r1, r4);
}

#[test]
fn tuning_is_deterministic_and_finite() {
    let s = SimScenario::calibrated(Setting::Sparse, Calibration::Label(9.5), 200, 1, 4).unwrap();
    let sample = draw_scenario(&s, 0);
    let grid = SureGrid::new(vec![0.2, 0.5, 1.0], vec![0.05, 0.2, 0.6], 5, 17).unwrap();
    let a = tune(&sample, &grid).unwrap();
    assert_eq!(a, tune(&sample, &grid).unwrap());
    for (_, _, v) in a.cells() {
        if let Some(v) = v {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn holdout_scores_ignore_their_own_fold() {
    let s = SimScenario::calibrated(Setting::Normal, Calibration::Label(9.6), 120, 1, 6).unwrap();
    let sample = draw_scenario(&s, 0);
    let folds = kfold_split(sample.len(), 4, 3).unwrap();
    let bw = Bandwidths::new(0.5, 0.3).unwrap();
    let base = sure_compound_cv(&sample, bw, &folds).unwrap();
    let i = 17;
    let fold = folds.fold_of()[i];
    let other = folds.holdout((fold + 1) % 4)[0];
    let mut x = sample.x().to_vec();
    x[i] = x[other];
    let moved = HeteroSample::new(x, sample.sigma().to_vec()).unwrap();
    let after = sure_compound_cv(&moved, bw, &folds).unwrap();
    for j in folds.holdout(fold) {
        if j != i {
            assert_eq!(base.per_point[j], after.per_point[j], "point {j} saw observation {i}");
        }
    }
    assert_ne!(base.per_point[other], after.per_point[other]);
}

#[test]
fn selection_bias_monte_carlo_grid() {
    let priors = [PriorSpec::point_mass(0.0), PriorSpec::normal(0.0, 1.0).unwrap()];
    let mut seed = 100;
    for prior in &priors {
        for t in [0.0, 1.0, 2.0] {
            for sigma in [1.0, 2.0] {
                seed += 1;
                let b = selection_bias_mc(prior, sigma, t, 400_000, seed).unwrap();
                assert!(b.z() < 3.0, "bias {prior:?} t={t} sigma={sigma}: {b:?}");
                let c = tweedie_correction_mc(prior, sigma, t, 400_000, seed + 1000).unwrap();
                assert!(c.z() < 3.0, "score {prior:?} t={t} sigma={sigma}: {c:?}");
            }
        }
    }
}

#[test]
fn ratio_calibration_holds_empirically() {
    for (setting, label) in [(Setting::Normal, 9.6), (Setting::Sparse, 9.5), (Setting::TwoPoint, 9.2)] {
        let s = SimScenario::calibrated(setting, Calibration::Label(label), 1_000_000, 1, 12).unwrap();
        let d = draw_scenario(&s, 0);
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let share = var(d.mu_true().unwrap()) / var(d.x());
        let target = label / (1.0 + label);
        assert!((share - target).abs() < 0.01, "{setting:?}: {share} vs {target}");
    }
}
