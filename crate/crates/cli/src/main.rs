//! `nest`: estimate, tune and simulate heteroscedastic empirical Bayes rules
//! from the command line.
//!
//! Every subcommand writes CSV to `--output` (atomically) or to stdout. A run
//! manifest with the resolved settings goes to stderr as one JSON line, and
//! failures print exactly one JSON error line to stderr with a nonzero exit.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nest", version, about = "Heteroscedastic empirical Bayes estimation of normal means")]
struct Cli {
    /// Seed for fold assignment and simulation draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the means of an `id,x,sigma` file.
    Estimate(EstimateArgs),
    /// Evaluate the NEST SURE surface over a bandwidth grid.
    Tune(TuneArgs),
    /// Monte Carlo MSE study for one simulation cell.
    Simulate(SimulateArgs),
    /// Selection-bias experiment on the smallest observations.
    Bias(BiasArgs),
    /// Exponential-family posterior mean from a marginal score.
    Expfam(ExpfamArgs),
    /// Two-proportion gap data from pass counts.
    PrepGap(PrepGapArgs),
}

#[derive(Args, Debug, Clone)]
struct Io {
    /// Input CSV file.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodName {
    Naive,
    Oracle,
    Nest,
    Tf,
    Scaled,
    KGroups,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SummationArg {
    Direct,
    Pruned,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// NEST h_x grid (comma separated).
    #[arg(long, value_delimiter = ',')]
    grid_hx: Option<Vec<f64>>,
    /// NEST h_sigma grid as multiples of the sample sd of sigma.
    #[arg(long, value_delimiter = ',')]
    grid_hsigma: Option<Vec<f64>>,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Kernel summation: exact over all points or skipping negligible terms.
    #[arg(long, value_enum, default_value_t = SummationArg::Pruned)]
    summation: SummationArg,
}

#[derive(Args, Debug, Clone)]
struct PostArgs {
    /// Clip estimates to [-B, B]; without a value B = 2 ln n.
    #[arg(long, num_args = 0..=1, default_missing_value = "auto")]
    truncate: Option<String>,
    /// Zero estimates whose sign disagrees with the observation.
    #[arg(long)]
    stabilize_sign: bool,
    /// Leave each observation out of its own density estimate.
    #[arg(long)]
    jackknife: bool,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    io: Io,
    /// Estimators to run (comma separated).
    #[arg(long, value_enum, value_delimiter = ',', default_value = "nest")]
    method: Vec<MethodName>,
    /// Fixed NEST h_x (requires --hsigma); skips tuning.
    #[arg(long, requires = "hsigma")]
    hx: Option<f64>,
    /// Fixed NEST h_sigma (requires --hx).
    #[arg(long, requires = "hx")]
    hsigma: Option<f64>,
    /// Fixed bandwidth for TF and Scaled; skips tuning.
    #[arg(long)]
    h: Option<f64>,
    /// Number of sigma groups for k-groups.
    #[arg(long, default_value_t = 2)]
    k_groups: usize,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    post: PostArgs,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    io: Io,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Normal,
    Sparse,
    TwoPoint,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Mean prior of the cell.
    #[arg(long, value_enum, default_value_t = ScenarioArg::Normal)]
    scenario: ScenarioArg,
    /// Cell label var(mu) / E[sigma^2]; default 9.6, 9.5 or 9.2 by scenario.
    #[arg(long)]
    ratio: Option<f64>,
    /// Estimators (default: the full comparison set for the scenario).
    #[arg(long, value_enum, value_delimiter = ',')]
    method: Option<Vec<MethodName>>,
    /// Number of sigma groups for k-groups.
    #[arg(long, default_value_t = 2)]
    k_groups: usize,
    /// Observations per replicate (overrides the profile).
    #[arg(long)]
    n: Option<usize>,
    /// Replicates (overrides the profile).
    #[arg(long)]
    reps: Option<usize>,
    /// n = 1000, 10 replicates (default).
    #[arg(long, conflicts_with = "full")]
    smoke: bool,
    /// n = 5000, 50 replicates.
    #[arg(long)]
    full: bool,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    post: PostArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BiasScenarioArg {
    SingleCenter,
    TwoCenter,
}

#[derive(Args, Debug)]
struct BiasArgs {
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BiasScenarioArg::SingleCenter)]
    scenario: BiasScenarioArg,
    /// Observations per replicate (overrides the profile).
    #[arg(long)]
    n: Option<usize>,
    /// Replicates (overrides the profile).
    #[arg(long)]
    reps: Option<usize>,
    /// Smallest observations kept per replicate.
    #[arg(long, default_value_t = 20)]
    select: usize,
    /// n = 1000, 50 replicates (default).
    #[arg(long, conflicts_with = "full")]
    smoke: bool,
    /// n = 5000, 200 replicates.
    #[arg(long)]
    full: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Binomial,
    NegBinomial,
    Gamma,
    Beta,
}

#[derive(Args, Debug)]
struct ExpfamArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Binomial trial count.
    #[arg(long)]
    n_trials: Option<u64>,
    /// Negative binomial size.
    #[arg(long)]
    r: Option<u64>,
    /// Gamma shape.
    #[arg(long)]
    alpha: Option<f64>,
    /// Beta second shape parameter.
    #[arg(long)]
    beta: Option<f64>,
    /// Observation in the family's data coordinate (ln x for Beta).
    #[arg(long, allow_hyphen_values = true)]
    x: f64,
    /// Estimated derivative of the log marginal at x.
    #[arg(long, allow_hyphen_values = true)]
    lf1: f64,
    /// Use the carrier-consistent harmonic terms for Binomial and NegBinomial.
    #[arg(long)]
    carrier: bool,
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrepGapArgs {
    #[command(flatten)]
    io: Io,
    /// Filtered-row log (default: `<output>.filtered.csv`, else stderr).
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            commands::report_error("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<nest_core::Error>()
                .map(nest_core::Error::kind)
                .unwrap_or("error");
            commands::report_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
