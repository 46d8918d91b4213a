//! Nonparametric empirical Bayes estimation of many normal means observed
//! with heteroscedastic, known noise levels.
//!
//! The central rule estimates each mean by Tweedie's formula
//! `mu_hat_i = x_i + sigma_i^2 f'(x_i) / f(x_i)`, where the marginal density
//! at noise level `sigma_i` is a two-dimensional weighted Gaussian kernel
//! estimate ([`kernel`]). Bandwidths are chosen by minimizing a K-fold Stein
//! unbiased risk estimate ([`sure`]).

pub mod error;
pub mod estimators;
pub mod expfam;
pub mod io;
pub mod kernel;
pub mod prior;
pub mod rng;
pub mod sample;
pub mod sim;
pub mod stats;
pub mod sure;

pub use error::{Error, Result};
pub use estimators::{estimate, EstimatorSpec, Method, Tuning};
pub use kernel::{DensityEval, KernelContext, Summation, TrainingSet};
pub use prior::PriorSpec;
pub use sample::{kfold_split, validate_sample, Bandwidths, FoldAssignment, HeteroSample};
pub use sure::{tune, GridSpec, SureGrid, SureReport};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
