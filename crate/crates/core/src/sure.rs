//! Stein's unbiased risk estimate for kernel Tweedie rules, K-fold compound
//! SURE, and grid-search bandwidth selection.
//!
//! For a rule `delta(x) = x + v * f'(x) / f(x)` with the density fitted on
//! data independent of `x ~ N(mu, v)`, the per-point estimate
//!
//! ```text
//! S = v + v^2 * (2 f f'' - f'^2) / f^2
//! ```
//!
//! has expectation equal to the risk `E (delta - mu)^2`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{DensityEval, GridKernel, GridMoments, GridScratch, KernelContext, RawMoments, Summation, TrainingSet};
use crate::prior::PriorSpec;
use crate::rng;
use crate::sample::{check_positive, kfold_split, Bandwidths, FoldAssignment, HeteroSample};
use crate::stats;

/// Fraction of floored evaluations above which a grid cell is discarded.
pub const MAX_FLOORED_FRACTION: f64 = 0.01;

/// Default `h_x` multipliers and `h_sigma` multipliers of `sd(sigma)`.
pub const DEFAULT_STEPS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

pub const DEFAULT_FOLDS: usize = 10;

/// SURE value at one point, with the floor flag of the density it used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SureValue {
    pub s: f64,
    pub floored: bool,
}

/// Per-point SURE from an already evaluated density with noise variance `v`.
pub fn sure_from_density(d: &DensityEval, v: f64) -> f64 {
    v + v * v * d.sure_bracket()
}

/// `S = sigma^2 + sigma^4 (2 f f'' - f'^2) / f^2` at `(x, sigma)`.
///
/// `ctx` must be fitted on data that excludes the scored point.
pub fn sure_point(ctx: &KernelContext<'_>, x: f64, sigma: f64) -> Result<SureValue> {
    let d = ctx.density_eval(x, sigma)?;
    Ok(SureValue {
        s: sure_from_density(&d, sigma * sigma),
        floored: d.floored,
    })
}

/// Compound SURE `S(h) = sum_i S_i(h)` under a fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CompoundSure {
    pub total: f64,
    pub per_point: Vec<f64>,
    pub floored: usize,
}

/// Scores every point against a density fitted on the complement of its fold,
/// using the direct-summation kernel path.
pub fn sure_compound_cv(sample: &HeteroSample, bw: Bandwidths, folds: &FoldAssignment) -> Result<CompoundSure> {
    sure_compound_cv_with(sample, bw, folds, Summation::Direct)
}

pub fn sure_compound_cv_with(
    sample: &HeteroSample,
    bw: Bandwidths,
    folds: &FoldAssignment,
    summation: Summation,
) -> Result<CompoundSure> {
    if folds.n() != sample.len() {
        return Err(Error::LengthMismatch {
            what: format!("folds cover {} points, sample has {}", folds.n(), sample.len()),
        });
    }
    let mut per_point = vec![0.0; sample.len()];
    let mut floored = 0;
    for fold in 0..folds.k() {
        let train = TrainingSet::from_indices(sample, &folds.training(fold))?;
        let ctx = KernelContext::new(&train, bw)?.with_summation(summation);
        for i in folds.holdout(fold) {
            let v = sure_point(&ctx, sample.x()[i], sample.sigma()[i]).map_err(|e| Error::at(i, e))?;
            per_point[i] = v.s;
            floored += v.floored as usize;
        }
    }
    Ok(CompoundSure {
        total: per_point.iter().sum(),
        per_point,
        floored,
    })
}

/// Absolute bandwidth grid for NEST tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SureGrid {
    pub h_x_values: Vec<f64>,
    pub h_sigma_values: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    #[serde(skip)]
    pub summation: Summation,
}

fn check_axis(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidGrid(format!("{name} is empty")));
    }
    for h in v {
        check_positive(name, *h).map_err(|e| Error::InvalidGrid(e.to_string()))?;
    }
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!("{name} must be strictly ascending")));
    }
    Ok(())
}

impl SureGrid {
    pub fn new(h_x_values: Vec<f64>, h_sigma_values: Vec<f64>, folds: usize, seed: u64) -> Result<Self> {
        let g = SureGrid {
            h_x_values,
            h_sigma_values,
            folds,
            seed,
            summation: Summation::Direct,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("h_x grid", &self.h_x_values)?;
        check_axis("h_sigma grid", &self.h_sigma_values)?;
        if self.folds < 2 {
            return Err(Error::InvalidGrid(format!("fold count {} < 2", self.folds)));
        }
        Ok(())
    }

    pub fn with_summation(mut self, summation: Summation) -> Self {
        self.summation = summation;
        self
    }
}

/// Grid described relative to the data: `h_x` multipliers as given,
/// `h_sigma` as multipliers of the sample sd of sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h_x: Vec<f64>,
    pub h_sigma_mult: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    #[serde(skip)]
    pub summation: Summation,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            h_x: DEFAULT_STEPS.to_vec(),
            h_sigma_mult: DEFAULT_STEPS.to_vec(),
            folds: DEFAULT_FOLDS,
            seed: 0,
            summation: Summation::Direct,
        }
    }
}

impl GridSpec {
    /// Absolute grid for `sample`. A constant sigma column scales by the
    /// common sigma instead of the (zero) standard deviation.
    pub fn resolve(&self, sample: &HeteroSample) -> Result<SureGrid> {
        let sd = sample.sigma_sd();
        let scale = if sd > 0.0 { sd } else { sample.sigma()[0] };
        let grid = SureGrid {
            h_x_values: self.h_x.clone(),
            h_sigma_values: self.h_sigma_mult.iter().map(|m| m * scale).collect(),
            folds: self.folds.min(sample.len()),
            seed: self.seed,
            summation: self.summation,
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// Outcome of a NEST grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct SureReport {
    pub h_x_values: Vec<f64>,
    pub h_sigma_values: Vec<f64>,
    /// `surface[s][x]` is `S(h_x_values[x], h_sigma_values[s])`; `None` marks
    /// a degenerate cell.
    pub surface: Vec<Vec<Option<f64>>>,
    pub floored: Vec<Vec<usize>>,
    pub argmin: Bandwidths,
    pub per_point: Vec<f64>,
}

impl SureReport {
    pub fn min_value(&self) -> f64 {
        self.cells()
            .filter_map(|(_, _, s)| s)
            .fold(f64::INFINITY, f64::min)
    }

    /// `(h_x, h_sigma, S)` in row-major order (h_sigma outer).
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, Option<f64>)> + '_ {
        self.h_sigma_values.iter().enumerate().flat_map(move |(b, &hs)| {
            self.h_x_values
                .iter()
                .enumerate()
                .map(move |(a, &hx)| (hx, hs, self.surface[b][a]))
        })
    }

    /// Surface as CSV with header `h_x,h_sigma,S`; degenerate cells print `NaN`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h_x", "h_sigma", "S"]).map_err(csv_err)?;
        for (hx, hs, s) in self.cells() {
            w.write_record([fmt_f64(hx), fmt_f64(hs), fmt_f64(s.unwrap_or(f64::NAN))])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Index of the smallest finite value; ties resolve to the earliest index.
fn argmin_first(values: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if let Some(v) = v {
            if best.map(|(_, b)| v < b).unwrap_or(true) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the minimizing cell. Ties go to the smallest `h_sigma`, then the
/// smallest `h_x`.
pub fn select_argmin(surface: &[Vec<Option<f64>>]) -> Option<(usize, usize)> {
    let width = surface.first().map(Vec::len).unwrap_or(0);
    let flat = surface.iter().flat_map(|row| row.iter().copied());
    argmin_first(flat).map(|i| (i / width, i % width))
}

struct FoldBlock {
    fold: usize,
    /// `values[(p * ns + b) * nx + a]` for holdout position `p`.
    values: Vec<(f64, bool)>,
    /// Sigma weights vanished for some holdout point.
    degenerate: Vec<bool>,
}

/// Grid search minimizing K-fold compound SURE over `(h_x, h_sigma)`.
///
/// One fold assignment (from `grid.seed`) is shared by every cell. A cell is
/// degenerate when any point hits [`Error::DegenerateWeights`] or more than
/// [`MAX_FLOORED_FRACTION`] of the points use the density floor.
pub fn tune(sample: &HeteroSample, grid: &SureGrid) -> Result<SureReport> {
    grid.validate()?;
    let n = sample.len();
    let folds = kfold_split(n, grid.folds, grid.seed)?;
    let holdouts: Vec<Vec<usize>> = (0..folds.k()).map(|f| folds.holdout(f)).collect();
    let trains: Vec<TrainingSet> = (0..folds.k())
        .map(|f| TrainingSet::from_indices(sample, &folds.training(f)))
        .collect::<Result<_>>()?;
    let nx = grid.h_x_values.len();
    let ns = grid.h_sigma_values.len();
    let floor_eps = crate::kernel::DEFAULT_FLOOR;

    let blocks: Vec<Result<FoldBlock>> = (0..folds.k())
        .into_par_iter()
        .map(|fold| {
            let gk = GridKernel::new(&trains[fold], &grid.h_x_values, &grid.h_sigma_values, grid.summation)?;
            let mut scratch = GridScratch::default();
            let mut gm = GridMoments::default();
            let holdout = &holdouts[fold];
            let mut values = vec![(0.0, false); holdout.len() * ns * nx];
            let mut degenerate = vec![false; ns];
            for (p, &i) in holdout.iter().enumerate() {
                let (x, s) = (sample.x()[i], sample.sigma()[i]);
                gk.moments(x, s, &mut scratch, &mut gm);
                for b in 0..ns {
                    let total = gm.totals[b];
                    if !(total > 0.0 && total.is_finite()) {
                        degenerate[b] = true;
                        continue;
                    }
                    for a in 0..nx {
                        let c = b * nx + a;
                        let raw = RawMoments {
                            f: gm.f[c] / total,
                            f1: gm.f1[c] / total,
                            f2: gm.f2[c] / total,
                        };
                        let d = DensityEval::from_raw(raw, floor_eps);
                        values[(p * ns + b) * nx + a] = (sure_from_density(&d, s * s), d.floored);
                    }
                }
            }
            Ok(FoldBlock { fold, values, degenerate })
        })
        .collect();

    // Scatter per-point values back to sample order, then sum in index order.
    let mut per_cell: Vec<Vec<Option<Vec<f64>>>> = vec![vec![Some(vec![0.0; n]); nx]; ns];
    let mut floored = vec![vec![0usize; nx]; ns];
    for block in blocks {
        let block = block?;
        for (b, row) in per_cell.iter_mut().enumerate() {
            if block.degenerate[b] {
                row.iter_mut().for_each(|c| *c = None);
                continue;
            }
            for (a, cell) in row.iter_mut().enumerate() {
                if let Some(buf) = cell.as_mut() {
                    for (p, &i) in holdouts[block.fold].iter().enumerate() {
                        let (v, fl) = block.values[(p * ns + b) * nx + a];
                        buf[i] = v;
                        floored[b][a] += fl as usize;
                    }
                }
            }
        }
    }
    let limit = MAX_FLOORED_FRACTION * n as f64;
    let surface: Vec<Vec<Option<f64>>> = per_cell
        .iter()
        .zip(&floored)
        .map(|(row, frow)| {
            row.iter()
                .zip(frow)
                .map(|(cell, &fl)| {
                    cell.as_ref()
                        .filter(|_| (fl as f64) <= limit)
                        .map(|v| v.iter().sum::<f64>())
                        .filter(|s| s.is_finite())
                })
                .collect()
        })
        .collect();
    let (b, a) = select_argmin(&surface).ok_or(Error::AllCellsDegenerate)?;
    let per_point = per_cell[b][a].take().expect("argmin cell is populated");
    Ok(SureReport {
        argmin: Bandwidths {
            h_x: grid.h_x_values[a],
            h_sigma: grid.h_sigma_values[b],
        },
        h_x_values: grid.h_x_values.clone(),
        h_sigma_values: grid.h_sigma_values.clone(),
        surface,
        floored,
        per_point,
    })
}

/// One-dimensional bandwidth grid for the pooled-density rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    pub values: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    #[serde(skip)]
    pub summation: Summation,
}

impl ScalarGrid {
    pub fn new(values: Vec<f64>, folds: usize, seed: u64) -> Result<Self> {
        let g = ScalarGrid {
            values,
            folds,
            seed,
            summation: Summation::Direct,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("bandwidth grid", &self.values)?;
        if self.folds < 2 {
            return Err(Error::InvalidGrid(format!("fold count {} < 2", self.folds)));
        }
        Ok(())
    }
}

/// Relative 1-D grid: multipliers on the noise scale of the coordinate the
/// pooled density lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarGridSpec {
    pub mult: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    #[serde(skip)]
    pub summation: Summation,
}

impl Default for ScalarGridSpec {
    fn default() -> Self {
        ScalarGridSpec {
            mult: (1..=20).map(|i| i as f64 / 10.0).collect(),
            folds: DEFAULT_FOLDS,
            seed: 0,
            summation: Summation::Direct,
        }
    }
}

impl ScalarGridSpec {
    pub fn resolve(&self, scale: f64, n: usize) -> Result<ScalarGrid> {
        let g = ScalarGrid {
            values: self.mult.iter().map(|m| m * scale).collect(),
            folds: self.folds.min(n),
            seed: self.seed,
            summation: self.summation,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarReport {
    pub values: Vec<f64>,
    pub surface: Vec<Option<f64>>,
    pub argmin: f64,
}

/// Pooled-density SURE search. Point `i` contributes
/// `scale[i] * (v[i] + v[i]^2 * bracket_i)` where the bracket comes from the
/// pooled KDE of the other folds evaluated at `points[i]`.
pub fn tune_pooled(points: &[f64], noise_var: &[f64], risk_scale: &[f64], grid: &ScalarGrid) -> Result<ScalarReport> {
    grid.validate()?;
    let n = points.len();
    if noise_var.len() != n || risk_scale.len() != n {
        return Err(Error::LengthMismatch {
            what: "pooled SURE columns differ in length".into(),
        });
    }
    let folds = kfold_split(n, grid.folds, grid.seed)?;
    let nh = grid.values.len();
    let blocks: Vec<(Vec<usize>, Vec<Vec<(f64, bool)>>)> = (0..folds.k())
        .into_par_iter()
        .map(|fold| {
            let train: Vec<f64> = folds.training(fold).iter().map(|&j| points[j]).collect();
            let unit = vec![1.0; train.len()];
            let train = TrainingSet::new(train, unit)?;
            // Unit sigmas with constant weights reduce the grid kernel to a pooled KDE.
            let gk = GridKernel::new(&train, &grid.values, &[1.0], grid.summation)?;
            let (mut scratch, mut gm) = (GridScratch::default(), GridMoments::default());
            let holdout = folds.holdout(fold);
            let mut cols = vec![Vec::with_capacity(holdout.len()); nh];
            for &i in &holdout {
                gk.moments(points[i], 1.0, &mut scratch, &mut gm);
                let total = gm.totals[0];
                for (c, col) in cols.iter_mut().enumerate() {
                    let raw = RawMoments {
                        f: gm.f[c] / total,
                        f1: gm.f1[c] / total,
                        f2: gm.f2[c] / total,
                    };
                    let d = DensityEval::from_raw(raw, crate::kernel::DEFAULT_FLOOR);
                    col.push((risk_scale[i] * sure_from_density(&d, noise_var[i]), d.floored));
                }
            }
            Ok((holdout, cols))
        })
        .collect::<Result<_>>()?;
    let mut per_cell = vec![vec![0.0; n]; nh];
    let mut floored = vec![0usize; nh];
    for (holdout, cols) in blocks {
        for (c, col) in cols.into_iter().enumerate() {
            for (&i, (s, fl)) in holdout.iter().zip(col) {
                per_cell[c][i] = s;
                floored[c] += fl as usize;
            }
        }
    }
    let limit = MAX_FLOORED_FRACTION * n as f64;
    let surface: Vec<Option<f64>> = per_cell
        .iter()
        .zip(&floored)
        .map(|(v, &fl)| Some(v.iter().sum::<f64>()).filter(|s| s.is_finite() && fl as f64 <= limit))
        .collect();
    let best = argmin_first(surface.iter().copied()).ok_or(Error::AllCellsDegenerate)?;
    Ok(ScalarReport {
        argmin: grid.values[best],
        values: grid.values.clone(),
        surface,
    })
}

/// How the Monte Carlo check draws fresh noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaDraw {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl SigmaDraw {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SigmaDraw::Fixed(s) => s,
            SigmaDraw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Monte Carlo comparison of mean SURE with realized risk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbiasednessCheck {
    pub mean_s: f64,
    pub mc_risk: f64,
    /// Standard error of the paired difference `S - (delta - mu)^2`.
    pub se: f64,
    pub se_s: f64,
    pub se_risk: f64,
}

/// Draws one training set of size `n_train` from `prior` and `sigma_draw`,
/// then `n_mc` fresh `(mu, sigma, X)` triples scored against that fixed
/// training set. `h_sigma_mult` multiplies the training sd of sigma.
pub fn sure_unbiasedness_check(
    prior: &PriorSpec,
    sigma_draw: SigmaDraw,
    h_x: f64,
    h_sigma_mult: f64,
    n_train: usize,
    n_mc: usize,
    seed: u64,
) -> Result<UnbiasednessCheck> {
    if n_mc == 0 {
        return Err(Error::EmptyMonteCarlo);
    }
    let mut train_rng = rng::rng_stream(seed, 0);
    let (mut xs, mut ss) = (Vec::with_capacity(n_train), Vec::with_capacity(n_train));
    for _ in 0..n_train {
        let mu = prior.sample(&mut train_rng);
        let s = sigma_draw.draw(&mut train_rng);
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut train_rng);
        xs.push(mu + s * z);
        ss.push(s);
    }
    let sd = stats::sample_sd(&ss);
    let h_sigma = h_sigma_mult * if sd > 0.0 { sd } else { ss[0] };
    let train = TrainingSet::new(xs, ss)?;
    let ctx = KernelContext::new(&train, Bandwidths::new(h_x, h_sigma)?)?;
    check_unbiasedness(&ctx, prior, sigma_draw, n_mc, seed)
}

/// Monte Carlo check against a given fitted context.
pub fn check_unbiasedness(
    ctx: &KernelContext<'_>,
    prior: &PriorSpec,
    sigma_draw: SigmaDraw,
    n_mc: usize,
    seed: u64,
) -> Result<UnbiasednessCheck> {
    if n_mc == 0 {
        return Err(Error::EmptyMonteCarlo);
    }
    let mut mc_rng = rng::rng_stream(seed, 1);
    let triples: Vec<(f64, f64, f64)> = (0..n_mc)
        .map(|_| {
            let mu = prior.sample(&mut mc_rng);
            let s = sigma_draw.draw(&mut mc_rng);
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut mc_rng);
            (mu, s, mu + s * z)
        })
        .collect();
    let pairs: Vec<(f64, f64)> = triples
        .par_iter()
        .map(|&(mu, s, x)| {
            let d = ctx.density_eval(x, s)?;
            let v = s * s;
            let est = x + v * d.score();
            Ok((sure_from_density(&d, v), (est - mu) * (est - mu)))
        })
        .collect::<Result<_>>()?;
    let s_vals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let losses: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diffs: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    Ok(UnbiasednessCheck {
        mean_s: stats::mean(&s_vals),
        mc_risk: stats::mean(&losses),
        se: stats::std_error(&diffs),
        se_s: stats::std_error(&s_vals),
        se_risk: stats::std_error(&losses),
    })
}
