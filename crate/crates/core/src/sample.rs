//! Datasets, bandwidth pairs and cross-validation folds.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Paired observations `(x_i, sigma_i)` with optional simulation truth.
///
/// Construction validates every column; once built the sample is immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroSample {
    x: Vec<f64>,
    sigma: Vec<f64>,
    mu_true: Option<Vec<f64>>,
}

/// Validates raw columns into a [`HeteroSample`].
///
/// Rows are never dropped: the first offending index is reported.
pub fn validate_sample(x: &[f64], sigma: &[f64], mu_true: Option<&[f64]>) -> Result<HeteroSample> {
    if x.len() != sigma.len() {
        return Err(Error::LengthMismatch {
            what: format!("x has {} rows, sigma has {}", x.len(), sigma.len()),
        });
    }
    if let Some(mu) = mu_true {
        if mu.len() != x.len() {
            return Err(Error::LengthMismatch {
                what: format!("x has {} rows, mu_true has {}", x.len(), mu.len()),
            });
        }
    }
    if x.is_empty() {
        return Err(Error::EmptySample);
    }
    for (i, (&xi, &si)) in x.iter().zip(sigma).enumerate() {
        if !xi.is_finite() {
            return Err(Error::NonFiniteValue(i));
        }
        if !si.is_finite() {
            return Err(Error::NonFiniteValue(i));
        }
        if si <= 0.0 {
            return Err(Error::NonPositiveSigma(i));
        }
    }
    if let Some(mu) = mu_true {
        if let Some(i) = mu.iter().position(|m| !m.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
    }
    Ok(HeteroSample {
        x: x.to_vec(),
        sigma: sigma.to_vec(),
        mu_true: mu_true.map(<[f64]>::to_vec),
    })
}

impl HeteroSample {
    pub fn new(x: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        validate_sample(&x, &sigma, None)
    }

    pub fn with_truth(x: Vec<f64>, sigma: Vec<f64>, mu_true: Vec<f64>) -> Result<Self> {
        validate_sample(&x, &sigma, Some(&mu_true))
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

    pub fn mu_true(&self) -> Option<&[f64]> {
        self.mu_true.as_deref()
    }

    /// Rows at `indices`, in the given order. Panics on out-of-range indices.
    pub fn subset(&self, indices: &[usize]) -> HeteroSample {
        HeteroSample {
            x: indices.iter().map(|&i| self.x[i]).collect(),
            sigma: indices.iter().map(|&i| self.sigma[i]).collect(),
            mu_true: self
                .mu_true
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }

    /// Sample standard deviation of the sigma column (n - 1 denominator, 0 for n = 1).
    pub fn sigma_sd(&self) -> f64 {
        crate::stats::sample_sd(&self.sigma)
    }

    /// Mean squared error of `mu_hat` against the stored truth, if any.
    pub fn mse(&self, mu_hat: &[f64]) -> Option<f64> {
        let mu = self.mu_true.as_ref()?;
        assert_eq!(mu.len(), mu_hat.len(), "estimate length differs from sample");
        let total: f64 = mu.iter().zip(mu_hat).map(|(m, e)| (e - m) * (e - m)).sum();
        Some(total / mu.len() as f64)
    }
}

/// Kernel bandwidths: `h_x` multiplies each training point's sigma, `h_sigma`
/// is in sigma units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h_x: f64,
    pub h_sigma: f64,
}

impl Bandwidths {
    pub fn new(h_x: f64, h_sigma: f64) -> Result<Self> {
        let bw = Bandwidths { h_x, h_sigma };
        bw.check()?;
        Ok(bw)
    }

    pub(crate) fn check(&self) -> Result<()> {
        check_positive("h_x", self.h_x)?;
        check_positive("h_sigma", self.h_sigma)
    }
}

pub(crate) fn check_positive(name: &str, h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidBandwidth(format!("{name} = {h} must be positive and finite")))
    }
}

/// Assignment of each observation to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

/// Deterministic K-fold split: a uniform random permutation of `0..n` drawn
/// from `seed`, then round-robin assignment along the permutation. Fold sizes
/// differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::BadFoldCount { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

impl FoldAssignment {
    /// Builds an assignment from explicit labels; every fold must be nonempty.
    pub fn from_labels(fold_of: Vec<usize>, k: usize) -> Result<Self> {
        let n = fold_of.len();
        if k < 2 || k > n {
            return Err(Error::BadFoldCount { n, k });
        }
        let mut seen = vec![false; k];
        for &f in &fold_of {
            if f >= k {
                return Err(Error::BadFoldCount { n, k });
            }
            seen[f] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::BadFoldCount { n, k });
        }
        Ok(FoldAssignment { fold_of, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    /// Held-out indices of `fold`, ascending.
    pub fn holdout(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Training indices (complement of `fold`), ascending.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}
