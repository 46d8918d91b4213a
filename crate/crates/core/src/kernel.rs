//! Two-dimensional weighted Gaussian kernel estimate of the conditional
//! marginal density `f_sigma(x)` and its first two derivatives in `x`.
//!
//! For a query `(x, sigma)` and training pairs `(x_j, sigma_j)`:
//!
//! ```text
//! w_j  = phi_{h_sigma}(sigma - sigma_j) / sum_k phi_{h_sigma}(sigma - sigma_k)
//! f    = sum_j w_j phi_{h_j}(x - x_j)                        h_j = h_x * sigma_j
//! f'   = sum_j w_j phi_{h_j}(x - x_j) (x_j - x) / h_j^2
//! f''  = sum_j w_j phi_{h_j}(x - x_j) / h_j^2 * (((x - x_j) / h_j)^2 - 1)
//! ```
//!
//! The reference path ([`Summation::Direct`]) sums every training point
//! left to right in training-index order. [`Summation::Pruned`] visits the
//! same terms in sigma-sorted order and skips any term whose Gaussian exponent
//! exceeds the largest one by more than [`PRUNE_EXPONENT`]; skipped terms are
//! below `exp(-50)` relative to the dominant term.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sample::{check_positive, Bandwidths, HeteroSample};
use crate::stats::FRAC_1_SQRT_2PI;

/// Default density floor applied before dividing by `f`.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Exponent gap beyond which the pruned path drops a kernel term.
pub const PRUNE_EXPONENT: f64 = 50.0;

/// `(f, f', f'')` at a query point. `f` is floored; `floored` records whether
/// the floor engaged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEval {
    pub f: f64,
    pub f1: f64,
    pub f2: f64,
    pub floored: bool,
}

impl DensityEval {
    pub fn from_raw(raw: RawMoments, floor_eps: f64) -> Self {
        let floored = !(raw.f >= floor_eps);
        DensityEval {
            f: if floored { floor_eps } else { raw.f },
            f1: raw.f1,
            f2: raw.f2,
            floored,
        }
    }

    /// Score `f'/f`.
    pub fn score(&self) -> f64 {
        self.f1 / self.f
    }

    /// `(2 f f'' - f'^2) / f^2`, the derivative term of the risk estimate.
    pub fn sure_bracket(&self) -> f64 {
        let s = self.f1 / self.f;
        2.0 * self.f2 / self.f - s * s
    }
}

/// Unfloored kernel sums.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RawMoments {
    pub f: f64,
    pub f1: f64,
    pub f2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Summation {
    #[default]
    Direct,
    Pruned,
}

/// Training pairs prepared for kernel evaluation.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    x: Vec<f64>,
    sigma: Vec<f64>,
    inv_sigma: Vec<f64>,
    by_sigma: Vec<u32>,
    sorted_sigma: Vec<f64>,
}

impl TrainingSet {
    pub fn new(x: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        // Validation shares the sample rules.
        crate::sample::validate_sample(&x, &sigma, None)?;
        let mut by_sigma: Vec<u32> = (0..x.len() as u32).collect();
        by_sigma.sort_by(|&a, &b| sigma[a as usize].total_cmp(&sigma[b as usize]).then(a.cmp(&b)));
        let sorted_sigma = by_sigma.iter().map(|&j| sigma[j as usize]).collect();
        let inv_sigma = sigma.iter().map(|s| 1.0 / s).collect();
        Ok(TrainingSet {
            x,
            sigma,
            inv_sigma,
            by_sigma,
            sorted_sigma,
        })
    }

    pub fn from_sample(sample: &HeteroSample) -> Self {
        Self::new(sample.x().to_vec(), sample.sigma().to_vec()).expect("validated sample")
    }

    /// Training set made of `sample` rows at `indices`.
    pub fn from_indices(sample: &HeteroSample, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| sample.x()[i]).collect(),
            indices.iter().map(|&i| sample.sigma()[i]).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// Normalized sigma weights over a subset of training indices.
#[derive(Debug, Clone, Default)]
pub struct SigmaWeights {
    idx: Vec<u32>,
    w: Vec<f64>,
}

impl SigmaWeights {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Unfloored kernel sums at `x` with x-bandwidth multiplier `h_x`.
    /// With `prune`, terms with exponent above [`PRUNE_EXPONENT`] are skipped.
    pub fn moments(&self, train: &TrainingSet, h_x: f64, x: f64, prune: bool) -> RawMoments {
        let inv_hx = 1.0 / h_x;
        let (mut f, mut f1, mut f2) = (0.0, 0.0, 0.0);
        for (&j, &w) in self.idx.iter().zip(&self.w) {
            let j = j as usize;
            let inv_h = train.inv_sigma[j] * inv_hx;
            let u = (x - train.x[j]) * inv_h;
            let e = 0.5 * u * u;
            if prune && e > PRUNE_EXPONENT {
                continue;
            }
            let k = w * FRAC_1_SQRT_2PI * inv_h * (-e).exp();
            f += k;
            f1 -= k * u * inv_h;
            f2 += k * inv_h * inv_h * (u * u - 1.0);
        }
        RawMoments { f, f1, f2 }
    }
}

/// A training set together with bandwidths and a density floor.
#[derive(Debug, Clone, Copy)]
pub struct KernelContext<'a> {
    train: &'a TrainingSet,
    bw: Bandwidths,
    floor_eps: f64,
    summation: Summation,
}

impl<'a> KernelContext<'a> {
    pub fn new(train: &'a TrainingSet, bw: Bandwidths) -> Result<Self> {
        bw.check()?;
        if train.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(KernelContext {
            train,
            bw,
            floor_eps: DEFAULT_FLOOR,
            summation: Summation::Direct,
        })
    }

    pub fn with_floor(mut self, floor_eps: f64) -> Result<Self> {
        if !(floor_eps > 0.0 && floor_eps.is_finite()) {
            return Err(Error::InvalidBandwidth(format!("density floor {floor_eps} must be positive")));
        }
        self.floor_eps = floor_eps;
        Ok(self)
    }

    pub fn with_summation(mut self, summation: Summation) -> Self {
        self.summation = summation;
        self
    }

    pub fn train(&self) -> &'a TrainingSet {
        self.train
    }

    pub fn bandwidths(&self) -> Bandwidths {
        self.bw
    }

    pub fn floor_eps(&self) -> f64 {
        self.floor_eps
    }

    pub fn summation(&self) -> Summation {
        self.summation
    }

    /// Dense normalized weights in training order.
    pub fn sigma_weights(&self, sigma: f64) -> Result<Vec<f64>> {
        let sw = self.dense_weights(sigma, None)?;
        Ok(sw.w)
    }

    /// Weights restricted per the context's summation mode, optionally
    /// leaving out training index `exclude`.
    pub fn weights(&self, sigma: f64, exclude: Option<usize>) -> Result<SigmaWeights> {
        match self.summation {
            Summation::Direct => self.dense_weights(sigma, exclude),
            Summation::Pruned => self.pruned_weights(sigma, exclude),
        }
    }

    fn dense_weights(&self, sigma: f64, exclude: Option<usize>) -> Result<SigmaWeights> {
        check_positive("query sigma", sigma)?;
        let c = 0.5 / (self.bw.h_sigma * self.bw.h_sigma);
        let n = self.train.len();
        let mut idx = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut total = 0.0;
        for (j, &sj) in self.train.sigma.iter().enumerate() {
            if exclude == Some(j) {
                continue;
            }
            let d = sigma - sj;
            let a = (-c * d * d).exp();
            total += a;
            idx.push(j as u32);
            w.push(a);
        }
        finish_weights(idx, w, total, sigma)
    }

    fn pruned_weights(&self, sigma: f64, exclude: Option<usize>) -> Result<SigmaWeights> {
        check_positive("query sigma", sigma)?;
        let sorted = &self.train.sorted_sigma;
        let hs = self.bw.h_sigma;
        let c = 0.5 / (hs * hs);
        // Nearest training sigma fixes the dominant exponent.
        let pos = sorted.partition_point(|&s| s < sigma);
        let mut nearest = f64::INFINITY;
        for p in pos.saturating_sub(1)..(pos + 1).min(sorted.len()) {
            if exclude.map(|e| self.train.by_sigma[p] as usize == e).unwrap_or(false) {
                continue;
            }
            nearest = nearest.min((sigma - sorted[p]).abs());
        }
        if !nearest.is_finite() {
            // Only the excluded point sits next to the query; fall back.
            return self.dense_weights(sigma, exclude);
        }
        let e_min = c * nearest * nearest;
        let radius = hs * (2.0 * (e_min + PRUNE_EXPONENT)).sqrt();
        let lo = sorted.partition_point(|&s| s < sigma - radius);
        let hi = sorted.partition_point(|&s| s <= sigma + radius);
        let mut idx = Vec::with_capacity(hi - lo);
        let mut w = Vec::with_capacity(hi - lo);
        let mut total = 0.0;
        for p in lo..hi {
            let j = self.train.by_sigma[p];
            if exclude == Some(j as usize) {
                continue;
            }
            let d = sigma - sorted[p];
            let a = (-c * d * d).exp();
            total += a;
            idx.push(j);
            w.push(a);
        }
        finish_weights(idx, w, total, sigma)
    }

    /// Unfloored `(f, f', f'')` at `(x, sigma)`.
    pub fn raw_moments(&self, x: f64, sigma: f64) -> Result<RawMoments> {
        self.raw_moments_excluding(x, sigma, None)
    }

    fn raw_moments_excluding(&self, x: f64, sigma: f64, exclude: Option<usize>) -> Result<RawMoments> {
        if !x.is_finite() {
            return Err(Error::NonFiniteValue(0));
        }
        let sw = self.weights(sigma, exclude)?;
        Ok(sw.moments(self.train, self.bw.h_x, x, self.summation == Summation::Pruned))
    }

    pub fn density_eval(&self, x: f64, sigma: f64) -> Result<DensityEval> {
        Ok(DensityEval::from_raw(self.raw_moments(x, sigma)?, self.floor_eps))
    }

    /// Density at `(x, sigma)` with training index `exclude` left out.
    pub fn density_eval_excluding(&self, x: f64, sigma: f64, exclude: usize) -> Result<DensityEval> {
        Ok(DensityEval::from_raw(
            self.raw_moments_excluding(x, sigma, Some(exclude))?,
            self.floor_eps,
        ))
    }

    /// Elementwise [`density_eval`](Self::density_eval); errors carry the query index.
    pub fn density_eval_batch(&self, queries: &[(f64, f64)]) -> Result<Vec<DensityEval>> {
        queries
            .par_iter()
            .enumerate()
            .map(|(i, &(x, s))| self.density_eval(x, s).map_err(|e| Error::at(i, e)))
            .collect()
    }
}

fn finish_weights(idx: Vec<u32>, mut w: Vec<f64>, total: f64, sigma: f64) -> Result<SigmaWeights> {
    if idx.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights { sigma });
    }
    for v in &mut w {
        *v /= total;
    }
    Ok(SigmaWeights { idx, w })
}

/// Ordinary one-dimensional Gaussian KDE with a fixed bandwidth, used by the
/// homoscedastic Tweedie rule and its grouped and standardized variants.
#[derive(Debug, Clone)]
pub struct PooledKde {
    x: Vec<f64>,
    sorted: Vec<(f64, u32)>,
    h: f64,
    floor_eps: f64,
    summation: Summation,
}

impl PooledKde {
    pub fn new(x: Vec<f64>, h: f64) -> Result<Self> {
        check_positive("h", h)?;
        if x.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        let mut sorted: Vec<(f64, u32)> = x.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(PooledKde {
            x,
            sorted,
            h,
            floor_eps: DEFAULT_FLOOR,
            summation: Summation::Direct,
        })
    }

    pub fn with_bandwidth(&self, h: f64) -> Result<Self> {
        check_positive("h", h)?;
        Ok(PooledKde { h, ..self.clone() })
    }

    pub fn with_summation(mut self, summation: Summation) -> Self {
        self.summation = summation;
        self
    }

    pub fn with_floor(mut self, floor_eps: f64) -> Self {
        self.floor_eps = floor_eps;
        self
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Unfloored sums, optionally leaving out index `exclude`.
    pub fn raw_moments(&self, x: f64, exclude: Option<usize>) -> RawMoments {
        let inv_h = 1.0 / self.h;
        let mut count = self.x.len();
        if exclude.is_some() {
            count -= 1;
        }
        if count == 0 {
            return RawMoments::default();
        }
        let scale = FRAC_1_SQRT_2PI * inv_h / count as f64;
        let (mut f, mut f1, mut f2) = (0.0, 0.0, 0.0);
        let mut add = |xj: f64| {
            let u = (x - xj) * inv_h;
            let k = scale * (-0.5 * u * u).exp();
            f += k;
            f1 -= k * u * inv_h;
            f2 += k * inv_h * inv_h * (u * u - 1.0);
        };
        match self.summation {
            Summation::Direct => {
                for (j, &xj) in self.x.iter().enumerate() {
                    if exclude != Some(j) {
                        add(xj);
                    }
                }
            }
            Summation::Pruned => {
                let r = self.h * (2.0 * PRUNE_EXPONENT).sqrt();
                let lo = self.sorted.partition_point(|p| p.0 < x - r);
                let hi = self.sorted.partition_point(|p| p.0 <= x + r);
                for &(xj, j) in &self.sorted[lo..hi] {
                    if exclude != Some(j as usize) {
                        add(xj);
                    }
                }
            }
        }
        RawMoments { f, f1, f2 }
    }

    pub fn density_eval(&self, x: f64) -> DensityEval {
        DensityEval::from_raw(self.raw_moments(x, None), self.floor_eps)
    }

    pub fn density_eval_excluding(&self, x: f64, exclude: usize) -> DensityEval {
        DensityEval::from_raw(self.raw_moments(x, Some(exclude)), self.floor_eps)
    }
}

/// Kernel sums at one query for every `(h_sigma, h_x)` cell of a grid.
///
/// Sigma weights are computed once per `h_sigma` and x-kernels once per
/// `h_x`; each cell is their inner product. Cell `(b, a)` is stored at
/// `b * nx + a`. `totals[b]` is the unnormalized weight mass, so the cell
/// density is `f[b * nx + a] / totals[b]`.
#[derive(Debug, Clone, Default)]
pub struct GridMoments {
    pub f: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub totals: Vec<f64>,
}

/// Training points processed per block in [`GridKernel::moments`].
const GRID_BLOCK: usize = 128;

/// Reusable buffers for [`GridKernel::moments`].
#[derive(Debug, Clone, Default)]
pub struct GridScratch {
    window: Vec<u32>,
    ds2: Vec<f64>,
    ex: Vec<f64>,
    inv_s: Vec<f64>,
    g: Vec<f64>,
    /// `ns x m` sigma weights, row-major.
    w: Vec<f64>,
    /// `3 nx x m` x-kernels and their two derivative factors, row-major.
    k: Vec<f64>,
    /// `ns x 3 nx` products.
    prod: Vec<f64>,
}

/// Evaluates [`GridMoments`] against one training set.
#[derive(Debug, Clone)]
pub struct GridKernel<'a> {
    train: &'a TrainingSet,
    inv_hx: Vec<f64>,
    c_sigma: Vec<f64>,
    h_sigma_max: f64,
    summation: Summation,
}

impl<'a> GridKernel<'a> {
    pub fn new(train: &'a TrainingSet, h_x: &[f64], h_sigma: &[f64], summation: Summation) -> Result<Self> {
        for &h in h_x {
            check_positive("h_x", h)?;
        }
        for &h in h_sigma {
            check_positive("h_sigma", h)?;
        }
        if train.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(GridKernel {
            train,
            inv_hx: h_x.iter().map(|h| 1.0 / h).collect(),
            c_sigma: h_sigma.iter().map(|h| 0.5 / (h * h)).collect(),
            h_sigma_max: h_sigma.iter().copied().fold(0.0, f64::max),
            summation,
        })
    }

    pub fn nx(&self) -> usize {
        self.inv_hx.len()
    }

    pub fn ns(&self) -> usize {
        self.c_sigma.len()
    }

    /// Training indices visited for a query at `sigma`: all of them in index
    /// order for direct summation, otherwise the sigma window of the widest
    /// `h_sigma` in sigma order.
    fn fill_window(&self, sigma: f64, window: &mut Vec<u32>) {
        window.clear();
        let train = self.train;
        match self.summation {
            Summation::Direct => window.extend(0..train.len() as u32),
            Summation::Pruned => {
                let sorted = &train.sorted_sigma;
                let pos = sorted.partition_point(|&s| s < sigma);
                let mut nearest = f64::INFINITY;
                for p in pos.saturating_sub(1)..(pos + 1).min(sorted.len()) {
                    nearest = nearest.min((sigma - sorted[p]).abs());
                }
                let hs = self.h_sigma_max;
                let e_min = 0.5 * (nearest / hs).powi(2);
                let radius = hs * (2.0 * (e_min + PRUNE_EXPONENT)).sqrt();
                let lo = sorted.partition_point(|&s| s < sigma - radius);
                let hi = sorted.partition_point(|&s| s <= sigma + radius);
                window.extend_from_slice(&train.by_sigma[lo..hi]);
            }
        }
    }

    pub fn moments(&self, x: f64, sigma: f64, scratch: &mut GridScratch, out: &mut GridMoments) {
        let (nx, ns) = (self.nx(), self.ns());
        let cols = 3 * nx + 1;
        let train = self.train;
        let mut window = std::mem::take(&mut scratch.window);
        self.fill_window(sigma, &mut window);
        let prune = self.summation == Summation::Pruned;
        let cut_x = if prune { PRUNE_EXPONENT } else { f64::INFINITY };
        let d2_min = window
            .iter()
            .map(|&j| (sigma - train.sigma[j as usize]).powi(2))
            .fold(f64::INFINITY, f64::min);
        scratch.prod.clear();
        scratch.prod.resize(ns * cols, 0.0);
        for block in window.chunks(GRID_BLOCK) {
            let m = block.len();
            scratch.ds2.clear();
            scratch.ex.clear();
            scratch.inv_s.clear();
            scratch.g.clear();
            for &j in block {
                let j = j as usize;
                let ds = sigma - train.sigma[j];
                let is = train.inv_sigma[j];
                let u = (x - train.x[j]) * is;
                scratch.ds2.push(ds * ds);
                scratch.ex.push(0.5 * u * u);
                scratch.inv_s.push(is);
                scratch.g.push(u * is);
            }
            scratch.w.resize(ns * m, 0.0);
            for (b, row) in scratch.w.chunks_exact_mut(m).enumerate() {
                let c = self.c_sigma[b];
                for (w, &d2) in row.iter_mut().zip(&scratch.ds2) {
                    *w = c * d2;
                }
                exp_neg_in_place(row);
                if prune {
                    let cut = c * d2_min + PRUNE_EXPONENT;
                    for (w, &d2) in row.iter_mut().zip(&scratch.ds2) {
                        *w = if c * d2 > cut { 0.0 } else { *w };
                    }
                }
            }
            // Rows 3a..3a+3 hold the x-kernel and its two derivative factors
            // for h_x index a; the trailing row of ones yields the weight totals.
            scratch.k.resize(cols * m, 0.0);
            for a in 0..nx {
                let ih = self.inv_hx[a];
                let ih2 = ih * ih;
                let (k0, rest) = scratch.k[3 * a * m..3 * (a + 1) * m].split_at_mut(m);
                let (k1, k2) = rest.split_at_mut(m);
                for (e, &ex) in k0.iter_mut().zip(&scratch.ex) {
                    *e = ex * ih2;
                }
                exp_neg_in_place(k0);
                let c0 = FRAC_1_SQRT_2PI * ih;
                for t in 0..m {
                    let e = scratch.ex[t] * ih2;
                    let is = scratch.inv_s[t];
                    let kv = if e > cut_x { 0.0 } else { c0 * is * k0[t] };
                    k0[t] = kv;
                    k1[t] = -kv * scratch.g[t] * ih2;
                    k2[t] = kv * is * is * ih2 * (2.0 * e - 1.0);
                }
            }
            scratch.k[3 * nx * m..].fill(1.0);
            if ns == 1 {
                let w = &scratch.w[..m];
                for (p, row) in scratch.prod.iter_mut().zip(scratch.k.chunks_exact(m)) {
                    *p += dot(row, w);
                }
                continue;
            }
            // prod (ns x cols) += w (ns x m) * k^T (m x cols)
            // SAFETY: the pointers cover ns*m, cols*m and ns*cols elements with the given strides.
            unsafe {
                matrixmultiply::dgemm(
                    ns,
                    m,
                    cols,
                    1.0,
                    scratch.w.as_ptr(),
                    m as isize,
                    1,
                    scratch.k.as_ptr(),
                    1,
                    m as isize,
                    1.0,
                    scratch.prod.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
        }
        for v in [&mut out.f, &mut out.f1, &mut out.f2, &mut out.totals] {
            v.clear();
        }
        for b in 0..ns {
            let row = &scratch.prod[b * cols..(b + 1) * cols];
            for a in 0..nx {
                out.f.push(row[3 * a]);
                out.f1.push(row[3 * a + 1]);
                out.f2.push(row[3 * a + 2]);
            }
            out.totals.push(row[3 * nx]);
        }
        scratch.window = window;
    }
}

/// Inner product with eight independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Replaces every `v` by `exp(-v)` for `v >= 0`; arguments beyond 700 give 0.
///
/// Branch-free Cody-Waite reduction with a degree-13 Taylor polynomial so the
/// loop vectorizes; relative error stays within a few ulp of `f64::exp`.
pub fn exp_neg_in_place(v: &mut [f64]) {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const C: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    for e in v.iter_mut() {
        let keep = if *e <= 700.0 { 1.0 } else { 0.0 };
        let x = -e.min(700.0);
        let t = x * LOG2E + SHIFT;
        let k = t - SHIFT;
        let r = (x - k * LN2_HI) - k * LN2_LO;
        let mut p = C[13];
        for &c in C[..13].iter().rev() {
            p = p * r + c;
        }
        let bits = (t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023)) << 52;
        *e = p * f64::from_bits(bits) * keep;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::normal_pdf;
    use proptest::prelude::*;

    fn ts(x: &[f64], s: &[f64]) -> TrainingSet {
        TrainingSet::new(x.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn homoscedastic_weights_are_uniform() {
        let t = ts(&[0.0, 1.0, 5.0, -2.0], &[0.7; 4]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.5, 0.2).unwrap()).unwrap();
        for q in [0.1, 0.7, 3.0] {
            for w in ctx.sigma_weights(q).unwrap() {
                assert!((w - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_point_weight_is_one() {
        let t = ts(&[3.0], &[2.0]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.5, 0.2).unwrap()).unwrap();
        assert_eq!(ctx.sigma_weights(1.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_point_weights_by_hand() {
        // phi_{0.3}(1) / phi_{0.3}(0) = exp(-1 / 0.18)
        let r = (-1.0f64 / 0.18).exp();
        assert!((r - 3.87e-3).abs() < 1e-5);
        let t = ts(&[-1.0, 1.0], &[1.0, 2.0]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.5, 0.3).unwrap()).unwrap();
        let w = ctx.sigma_weights(1.0).unwrap();
        assert!((w[0] - 1.0 / (1.0 + r)).abs() < 1e-15);
        assert!((w[1] - r / (1.0 + r)).abs() < 1e-15);
        assert!((w[0] - 0.99615).abs() < 1e-5);
        assert!((w[1] - 0.00385).abs() < 1e-5);
    }

    #[test]
    fn degenerate_weights_when_normalizer_underflows() {
        let t = ts(&[0.0], &[1.0]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.5, 1e-4).unwrap()).unwrap();
        assert!(matches!(ctx.sigma_weights(2.0), Err(Error::DegenerateWeights { .. })));
        assert!(matches!(
            ctx.with_summation(Summation::Pruned).density_eval(0.0, 2.0),
            Err(Error::DegenerateWeights { .. })
        ));
    }

    #[test]
    fn single_kernel_at_center() {
        let t = ts(&[0.0], &[1.0]);
        let ctx = KernelContext::new(&t, Bandwidths::new(1.0, 0.5).unwrap()).unwrap();
        let d = ctx.density_eval(0.0, 1.0).unwrap();
        assert!((d.f - FRAC_1_SQRT_2PI).abs() < 1e-16);
        assert_eq!(d.f1, 0.0);
        assert!((d.f2 + FRAC_1_SQRT_2PI).abs() < 1e-16);
        assert!(!d.floored);
    }

    #[test]
    fn duplicate_points_match_single_point() {
        let one = ts(&[0.0], &[1.0]);
        let two = ts(&[0.0, 0.0], &[1.0, 1.0]);
        let bw = Bandwidths::new(0.8, 0.3).unwrap();
        let a = KernelContext::new(&one, bw).unwrap().density_eval(0.4, 1.3).unwrap();
        let b = KernelContext::new(&two, bw).unwrap().density_eval(0.4, 1.3).unwrap();
        assert!((a.f - b.f).abs() < 1e-16);
        assert!((a.f1 - b.f1).abs() < 1e-16);
        assert!((a.f2 - b.f2).abs() < 1e-16);
    }

    #[test]
    fn two_term_hand_summation() {
        let t = ts(&[-1.0, 1.0], &[1.0, 2.0]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.5, 0.3).unwrap()).unwrap();
        let d = ctx.density_eval(0.0, 1.0).unwrap();
        // Independent oracle: weights from the sigma kernel ratio, then two
        // Gaussian terms with bandwidths 0.5 and 1.0.
        let r = (-1.0f64 / 0.18).exp();
        let (w0, w1) = (1.0 / (1.0 + r), r / (1.0 + r));
        let (h0, h1) = (0.5, 1.0);
        let k0 = normal_pdf(1.0, h0);
        let k1 = normal_pdf(-1.0, h1);
        let f = w0 * k0 + w1 * k1;
        let f1 = w0 * k0 * (-1.0 - 0.0) / (h0 * h0) + w1 * k1 * (1.0 - 0.0) / (h1 * h1);
        let f2 = w0 * k0 / (h0 * h0) * ((1.0 / h0).powi(2) - 1.0) + w1 * k1 / (h1 * h1) * ((1.0 / h1).powi(2) - 1.0);
        assert!((d.f - f).abs() < 1e-15);
        assert!((d.f1 - f1).abs() < 1e-15);
        assert!((d.f2 - f2).abs() < 1e-14);
    }

    #[test]
    fn floor_engages_far_in_the_tail() {
        let t = ts(&[0.0], &[1.0]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.1, 0.5).unwrap()).unwrap();
        let d = ctx.density_eval(50.0, 1.0).unwrap();
        assert!(d.floored);
        assert_eq!(d.f, DEFAULT_FLOOR);
        assert!(!ctx.raw_moments(50.0, 1.0).unwrap().f.is_nan());
    }

    #[test]
    fn batch_edge_cases() {
        let t = ts(&[0.0, 1.0], &[1.0, 2.0]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.5, 0.3).unwrap()).unwrap();
        assert!(ctx.density_eval_batch(&[]).unwrap().is_empty());
        assert_eq!(
            ctx.density_eval_batch(&[(0.3, 1.5)]).unwrap(),
            vec![ctx.density_eval(0.3, 1.5).unwrap()]
        );
        let err = ctx.density_eval_batch(&[(0.3, 1.5), (0.0, -1.0)]).unwrap_err();
        assert!(matches!(err, Error::AtIndex { index: 1, .. }));
    }

    #[test]
    fn exclusion_matches_smaller_training_set() {
        let full = ts(&[0.0, 1.0, 2.5, -0.3], &[1.0, 0.5, 0.8, 1.2]);
        let part = ts(&[0.0, 2.5, -0.3], &[1.0, 0.8, 1.2]);
        let bw = Bandwidths::new(0.6, 0.4).unwrap();
        for mode in [Summation::Direct, Summation::Pruned] {
            let a = KernelContext::new(&full, bw).unwrap().with_summation(mode);
            let b = KernelContext::new(&part, bw).unwrap().with_summation(mode);
            let da = a.density_eval_excluding(0.7, 0.9, 1).unwrap();
            let db = b.density_eval(0.7, 0.9).unwrap();
            assert!((da.f - db.f).abs() < 1e-15 && (da.f1 - db.f1).abs() < 1e-15);
        }
    }

    #[test]
    fn pooled_kde_matches_weighted_kernel_when_homoscedastic() {
        let xs = vec![0.3, -1.0, 2.0, 0.9];
        let t = ts(&xs, &[0.5; 4]);
        let ctx = KernelContext::new(&t, Bandwidths::new(0.8, 0.1).unwrap()).unwrap();
        let kde = PooledKde::new(xs, 0.4).unwrap();
        let a = ctx.density_eval(0.5, 0.5).unwrap();
        let b = kde.density_eval(0.5);
        assert!((a.f - b.f).abs() < 1e-15);
        assert!((a.f1 - b.f1).abs() < 1e-15);
        assert!((a.f2 - b.f2).abs() < 1e-14);
    }

    #[test]
    fn fast_exp_matches_std() {
        let args: Vec<f64> = (0..20_000).map(|i| i as f64 * 0.035).chain([0.0, 1e-300, 699.9, 700.0, 701.0, 1e6]).collect();
        let mut v = args.clone();
        exp_neg_in_place(&mut v);
        for (&a, &got) in args.iter().zip(&v) {
            let want = if a > 700.0 { 0.0 } else { (-a).exp() };
            let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
            assert!(rel < 1e-15, "exp(-{a}): {got} vs {want}");
        }
    }

    #[test]
    fn grid_kernel_matches_context() {
        let n = 300;
        let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.07).collect();
        let s: Vec<f64> = (0..n).map(|i| 0.2 + (i * 53 % 97) as f64 * 0.015).collect();
        let t = ts(&x, &s);
        let hx = [0.1, 0.4, 1.0];
        let hs = [0.05, 0.2, 0.6];
        for summation in [Summation::Direct, Summation::Pruned] {
            let gk = GridKernel::new(&t, &hx, &hs, summation).unwrap();
            let (mut scratch, mut gm) = (GridScratch::default(), GridMoments::default());
            for (qx, qs) in [(0.3, 0.5), (-2.0, 1.4), (3.1, 0.25)] {
                gk.moments(qx, qs, &mut scratch, &mut gm);
                for (b, &h_sigma) in hs.iter().enumerate() {
                    for (a, &h_x) in hx.iter().enumerate() {
                        let ctx = KernelContext::new(&t, Bandwidths::new(h_x, h_sigma).unwrap())
                            .unwrap()
                            .with_summation(summation);
                        let want = ctx.raw_moments(qx, qs).unwrap();
                        let c = b * hx.len() + a;
                        let total = gm.totals[b];
                        let scale = 1.0 / (h_x * 0.2);
                        let close = |g: f64, w: f64, k: i32| (g - w).abs() <= 1e-12 * w.abs() + 1e-15 * scale.powi(k);
                        assert!(close(gm.f[c] / total, want.f, 1), "{summation:?} f at ({h_x}, {h_sigma})");
                        assert!(close(gm.f1[c] / total, want.f1, 2), "{summation:?} f1 at ({h_x}, {h_sigma})");
                        assert!(close(gm.f2[c] / total, want.f2, 3), "{summation:?} f2 at ({h_x}, {h_sigma})");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pruned_matches_direct(
            pts in proptest::collection::vec((-5.0f64..5.0, 0.1f64..2.0), 1..60),
            qx in -6.0f64..6.0, qs in 0.1f64..2.0, hx in 0.05f64..1.5, hs in 0.02f64..1.0,
        ) {
            let (x, s): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let t = TrainingSet::new(x, s).unwrap();
            let bw = Bandwidths::new(hx, hs).unwrap();
            let direct = KernelContext::new(&t, bw).unwrap();
            let pruned = direct.with_summation(Summation::Pruned);
            match (direct.raw_moments(qx, qs), pruned.raw_moments(qx, qs)) {
                (Ok(a), Ok(b)) => {
                    // Below the density floor only an absolute bound in kernel units is meaningful.
                    let inv_h = 1.0 + 1.0 / (hx * t.sigma().iter().copied().fold(f64::INFINITY, f64::min));
                    let tol = |v: f64, k: i32| 1e-8 * v.abs() + 1e-15 * inv_h.powi(k);
                    prop_assert!((a.f - b.f).abs() <= tol(a.f, 1));
                    prop_assert!((a.f1 - b.f1).abs() <= tol(a.f1, 2));
                    prop_assert!((a.f2 - b.f2).abs() <= tol(a.f2, 3));
                }
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "paths disagree: {:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn permutation_invariance(
            pts in proptest::collection::vec((-3.0f64..3.0, 0.2f64..2.0), 2..30),
            qx in -3.0f64..3.0, qs in 0.2f64..2.0,
        ) {
            let (x, s): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
            let (rx, rs): (Vec<f64>, Vec<f64>) = pts.iter().rev().copied().unzip();
            let bw = Bandwidths::new(0.5, 0.4).unwrap();
            let a = TrainingSet::new(x, s).unwrap();
            let b = TrainingSet::new(rx, rs).unwrap();
            let da = KernelContext::new(&a, bw).unwrap().raw_moments(qx, qs).unwrap();
            let db = KernelContext::new(&b, bw).unwrap().raw_moments(qx, qs).unwrap();
            prop_assert!((da.f - db.f).abs() <= 1e-12 * da.f.abs().max(1e-300));
            prop_assert!((da.f1 - db.f1).abs() <= 1e-12 * da.f1.abs().max(da.f));
        }
    }
}
