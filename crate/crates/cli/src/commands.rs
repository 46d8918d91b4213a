//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use nest_core::estimators::{default_truncation_bound, Fitted};
use nest_core::expfam::{self, Family, FamilyPoint, ScoreEstimate};
use nest_core::io::{self as nio, Dataset};
use nest_core::sim::bias::{default_bias_estimators, run_bias_experiment, BiasConfig, BiasSetting};
use nest_core::sim::{run_mse_study, Calibration, Setting, SimScenario};
use nest_core::sure::{ScalarGridSpec, DEFAULT_STEPS};
use nest_core::{estimate, Bandwidths, EstimatorSpec, GridSpec, Method, PriorSpec, Summation, Tuning};

use crate::{
    BiasArgs, BiasScenarioArg, Cli, Command, EstimateArgs, ExpfamArgs, FamilyArg, GridArgs, MethodName, PostArgs,
    PrepGapArgs, ScenarioArg, SimulateArgs, SummationArg, TuneArgs,
};

/// Prints the single structured failure line.
pub fn report_error(kind: &str, message: &str) {
    let line = json!({ "status": "error", "kind": kind, "message": message });
    eprintln!("{line}");
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let base = json!({
        "version": nest_core::VERSION,
        "seed": cli.seed,
        "threads": cli.threads.unwrap_or_else(rayon::current_num_threads),
    });
    let seed = cli.seed;
    let details = match cli.command {
        Command::Estimate(a) => cmd_estimate(a, seed)?,
        Command::Tune(a) => cmd_tune(a, seed)?,
        Command::Simulate(a) => cmd_simulate(a, seed)?,
        Command::Bias(a) => cmd_bias(a, seed)?,
        Command::Expfam(a) => cmd_expfam(a)?,
        Command::PrepGap(a) => cmd_prep_gap(a)?,
    };
    let mut manifest = base;
    if let (Value::Object(m), Value::Object(d)) = (&mut manifest, details) {
        m.extend(d);
    }
    eprintln!("{}", json!({ "manifest": manifest }));
    Ok(())
}

/// Writes through `fill` to `path` atomically, or to stdout.
fn emit<F>(path: Option<&Path>, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> nest_core::Result<()>,
{
    match path {
        Some(p) => nio::write_atomic(p, fill)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            fill(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn summation(s: SummationArg) -> Summation {
    match s {
        SummationArg::Direct => Summation::Direct,
        SummationArg::Pruned => Summation::Pruned,
    }
}

fn nest_grid(g: &GridArgs, seed: u64) -> GridSpec {
    GridSpec {
        h_x: g.grid_hx.clone().unwrap_or_else(|| DEFAULT_STEPS.to_vec()),
        h_sigma_mult: g.grid_hsigma.clone().unwrap_or_else(|| DEFAULT_STEPS.to_vec()),
        folds: g.folds,
        seed,
        summation: summation(g.summation),
    }
}

fn scalar_grid(g: &GridArgs, seed: u64) -> ScalarGridSpec {
    ScalarGridSpec {
        folds: g.folds,
        seed,
        summation: summation(g.summation),
        ..ScalarGridSpec::default()
    }
}

fn truncation(post: &PostArgs, n: usize) -> Result<Option<f64>> {
    match post.truncate.as_deref() {
        None => Ok(None),
        Some("auto") => Ok(Some(default_truncation_bound(n))),
        Some(v) => {
            let b: f64 = v.parse().with_context(|| format!("--truncate value {v:?} is not a number"))?;
            if !(b > 0.0 && b.is_finite()) {
                bail!("--truncate bound {b} must be positive");
            }
            Ok(Some(b))
        }
    }
}

struct SpecInputs<'a> {
    grid: &'a GridArgs,
    post: &'a PostArgs,
    seed: u64,
    n: usize,
    k_groups: usize,
    nest_fixed: Option<Bandwidths>,
    scalar_fixed: Option<f64>,
    prior: Option<PriorSpec>,
    /// Sign-stabilize Tweedie-type rules even without the flag.
    stabilize_tweedie: bool,
}

fn build_spec(name: MethodName, inp: &SpecInputs<'_>) -> Result<EstimatorSpec> {
    let scalar = |seed| match inp.scalar_fixed {
        Some(h) => Tuning::Fixed(h),
        None => Tuning::Sure(scalar_grid(inp.grid, seed)),
    };
    let method = match name {
        MethodName::Naive => Method::Naive,
        MethodName::Oracle => match &inp.prior {
            Some(prior) => Method::Oracle { prior: *prior },
            None => bail!("the oracle needs a known prior and is only available in simulate"),
        },
        MethodName::Nest => Method::Nest {
            tuning: match inp.nest_fixed {
                Some(bw) => Tuning::Fixed(bw),
                None => Tuning::Sure(nest_grid(inp.grid, inp.seed)),
            },
        },
        MethodName::Tf => Method::Tf { tuning: scalar(inp.seed) },
        MethodName::Scaled => Method::Scaled { tuning: scalar(inp.seed) },
        MethodName::KGroups => Method::KGroups {
            k: inp.k_groups,
            tuning: match inp.scalar_fixed {
                Some(h) => Tuning::Fixed(vec![h; inp.k_groups]),
                None => Tuning::Sure(scalar_grid(inp.grid, inp.seed)),
            },
        },
    };
    let tweedie = !matches!(name, MethodName::Naive | MethodName::Oracle);
    let mut spec = EstimatorSpec::new(method).with_summation(summation(inp.grid.summation));
    if let Some(b) = truncation(inp.post, inp.n)? {
        spec = spec.truncated(b);
    }
    if inp.post.stabilize_sign || (tweedie && inp.stabilize_tweedie) {
        spec = spec.sign_stabilized();
    }
    if inp.post.jackknife {
        spec = spec.jackknifed();
    }
    Ok(spec)
}

fn fitted_json(f: &Fitted) -> Value {
    match f {
        Fitted::None => Value::Null,
        Fitted::Nest(bw) => json!({ "h_x": bw.h_x, "h_sigma": bw.h_sigma }),
        Fitted::Scalar(h) => json!({ "h": h }),
        Fitted::Groups { groups, bandwidths } => json!({
            "group_sizes": groups.iter().map(Vec::len).collect::<Vec<_>>(),
            "h": bandwidths,
        }),
    }
}

fn grid_json(g: &GridArgs) -> Value {
    json!({
        "grid_hx": g.grid_hx.clone().unwrap_or_else(|| DEFAULT_STEPS.to_vec()),
        "grid_hsigma_mult": g.grid_hsigma.clone().unwrap_or_else(|| DEFAULT_STEPS.to_vec()),
        "folds": g.folds,
        "summation": format!("{:?}", g.summation).to_lowercase(),
    })
}

fn unique(methods: &[MethodName]) -> Result<()> {
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].contains(m) {
            bail!("method {m:?} requested twice");
        }
    }
    Ok(())
}

fn cmd_estimate(a: EstimateArgs, seed: u64) -> Result<Value> {
    unique(&a.method)?;
    let data = Dataset::read_path(&a.io.input)?;
    let n = data.sample.len();
    let nest_fixed = match (a.hx, a.hsigma) {
        (Some(hx), Some(hs)) => Some(Bandwidths::new(hx, hs)?),
        _ => None,
    };
    let inp = SpecInputs {
        grid: &a.grid,
        post: &a.post,
        seed,
        n,
        k_groups: a.k_groups,
        nest_fixed,
        scalar_fixed: a.h,
        prior: None,
        stabilize_tweedie: false,
    };
    let mut columns = Vec::new();
    let mut fitted = serde_json::Map::new();
    for &m in &a.method {
        let spec = build_spec(m, &inp)?;
        let est = estimate(&spec, &data.sample).with_context(|| format!("running {}", spec.name()))?;
        fitted.insert(
            spec.name(),
            json!({ "fitted": fitted_json(&est.fitted), "floored": est.floored, "truncation": spec.truncation_bound }),
        );
        columns.push((spec.name(), est.mu_hat));
    }
    emit(a.io.output.as_deref(), |w| data.write_with(&columns, w))?;
    let mut out = json!({
        "command": "estimate",
        "input": a.io.input,
        "n": n,
        "estimators": fitted,
        "grid": grid_json(&a.grid),
    });
    if n == 1 {
        out["note"] = json!("single observation: kernel rules use the observation as their own training set");
    }
    Ok(out)
}

fn cmd_tune(a: TuneArgs, seed: u64) -> Result<Value> {
    let data = Dataset::read_path(&a.io.input)?;
    let grid = nest_grid(&a.grid, seed).resolve(&data.sample)?;
    let report = nest_core::tune(&data.sample, &grid)?;
    emit(a.io.output.as_deref(), |w| report.write_csv(w))?;
    Ok(json!({
        "command": "tune",
        "input": a.io.input,
        "n": data.sample.len(),
        "grid": grid_json(&a.grid),
        "h_sigma_values": grid.h_sigma_values,
        "argmin": { "h_x": report.argmin.h_x, "h_sigma": report.argmin.h_sigma, "S": report.min_value() },
    }))
}

/// `(n, reps)` of the selected profile; smoke is the default.
fn profile_sizes(full: bool, smoke_nr: (usize, usize), full_nr: (usize, usize)) -> (usize, usize) {
    if full {
        full_nr
    } else {
        smoke_nr
    }
}

fn cmd_simulate(a: SimulateArgs, seed: u64) -> Result<Value> {
    let setting = match a.scenario {
        ScenarioArg::Normal => Setting::Normal,
        ScenarioArg::Sparse => Setting::Sparse,
        ScenarioArg::TwoPoint => Setting::TwoPoint,
    };
    let ratio = a.ratio.unwrap_or(match setting {
        Setting::Normal => 9.6,
        Setting::Sparse => 9.5,
        Setting::TwoPoint => 9.2,
    });
    let (pn, preps) = profile_sizes(a.full, (1000, 10), (5000, 50));
    let n = a.n.unwrap_or(pn);
    let reps = a.reps.unwrap_or(preps);
    let scenario = SimScenario::calibrated(setting, Calibration::Label(ratio), n, reps, seed)?;
    let methods = a.method.clone().unwrap_or_else(|| {
        vec![
            MethodName::Naive,
            MethodName::Oracle,
            MethodName::Nest,
            MethodName::Tf,
            MethodName::Scaled,
            MethodName::KGroups,
        ]
    });
    unique(&methods)?;
    let inp = SpecInputs {
        grid: &a.grid,
        post: &a.post,
        seed,
        n,
        k_groups: a.k_groups,
        nest_fixed: None,
        scalar_fixed: None,
        prior: Some(setting.prior()),
        stabilize_tweedie: setting == Setting::Sparse,
    };
    let specs = methods.iter().map(|&m| build_spec(m, &inp)).collect::<Result<Vec<_>>>()?;
    let table = run_mse_study(&scenario, &specs)?;
    emit(a.output.as_deref(), |w| table.write_csv(w))?;
    let sigma_max = match scenario.sigma_law {
        nest_core::sim::SigmaLaw::Uniform { hi, .. } => Some(hi),
        _ => None,
    };
    Ok(json!({
        "command": "simulate",
        "scenario": scenario.id,
        "ratio_label": ratio,
        "sigma_max": sigma_max,
        "variance_share": scenario.variance_share(),
        "n": n,
        "reps": reps,
        "estimators": specs.iter().map(EstimatorSpec::name).collect::<Vec<_>>(),
        "grid": grid_json(&a.grid),
    }))
}

fn cmd_bias(a: BiasArgs, seed: u64) -> Result<Value> {
    let setting = match a.scenario {
        BiasScenarioArg::SingleCenter => BiasSetting::SingleCenter,
        BiasScenarioArg::TwoCenter => BiasSetting::TwoCenter,
    };
    let (pn, preps) = profile_sizes(a.full, (1000, 50), (5000, 200));
    let cfg = BiasConfig {
        setting,
        n: a.n.unwrap_or(pn),
        reps: a.reps.unwrap_or(preps),
        select_k: a.select,
        seed,
    };
    let estimators = default_bias_estimators();
    let result = run_bias_experiment(&cfg, &estimators)?;
    emit(a.output.as_deref(), |w| result.write_csv(w))?;
    let summary: serde_json::Map<String, Value> = result
        .series
        .iter()
        .map(|s| (s.name.clone(), json!({ "mean_diff": s.mean(), "se": s.se() })))
        .collect();
    Ok(json!({
        "command": "bias",
        "scenario": setting.name(),
        "n": cfg.n,
        "reps": cfg.reps,
        "select": cfg.select_k,
        "summary": summary,
    }))
}

fn cmd_expfam(a: ExpfamArgs) -> Result<Value> {
    fn need<T>(v: Option<T>, flag: &str, family: &str) -> Result<T> {
        v.with_context(|| format!("{family} needs --{flag}"))
    }
    let family = match a.family {
        FamilyArg::Binomial => Family::Binomial {
            n_trials: need(a.n_trials, "n-trials", "binomial")?,
        },
        FamilyArg::NegBinomial => Family::NegBinomial {
            r: need(a.r, "r", "neg-binomial")?,
        },
        FamilyArg::Gamma => Family::Gamma {
            alpha: need(a.alpha, "alpha", "gamma")?,
        },
        FamilyArg::Beta => Family::Beta {
            beta: need(a.beta, "beta", "beta")?,
        },
    };
    let point = FamilyPoint::new(family, a.x)?;
    let score = ScoreEstimate::new(a.lf1)?;
    let form = if a.carrier { "carrier" } else { "printed" };
    let mean = if a.carrier {
        expfam::posterior_mean_carrier(&point, score)?
    } else {
        expfam::posterior_mean(&point, score)?
    };
    let name = format!("{:?}", a.family).to_lowercase();
    emit(a.output.as_deref(), |w| {
        let mut out = csv::Writer::from_writer(w);
        let err = nest_core::sure::csv_err;
        out.write_record(["family", "x", "lf1", "form", "posterior_mean"]).map_err(err)?;
        out.write_record([
            name.clone(),
            nest_core::sure::fmt_f64(a.x),
            nest_core::sure::fmt_f64(a.lf1),
            form.to_string(),
            nest_core::sure::fmt_f64(mean),
        ])
        .map_err(err)?;
        out.flush()?;
        Ok(())
    })?;
    Ok(json!({ "command": "expfam", "family": name, "form": form, "posterior_mean": mean }))
}

fn cmd_prep_gap(a: PrepGapArgs) -> Result<Value> {
    let file = fs::File::open(&a.io.input).with_context(|| format!("opening {}", a.io.input.display()))?;
    let data = nio::prep_gap(file)?;
    emit(a.io.output.as_deref(), |w| data.write_csv(w))?;
    let log_path: Option<PathBuf> = a.log.clone().or_else(|| {
        a.io.output.as_ref().map(|o| {
            let mut s = o.clone().into_os_string();
            s.push(".filtered.csv");
            PathBuf::from(s)
        })
    });
    match &log_path {
        Some(p) => nio::write_atomic(p, |w| data.write_log(w))?,
        None => data.write_log(std::io::stderr())?,
    }
    Ok(json!({
        "command": "prep-gap",
        "input": a.io.input,
        "kept": data.kept.len(),
        "filtered": data.filtered.len(),
        "log": log_path,
    }))
}
