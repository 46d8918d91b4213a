//! Small numeric helpers shared across modules.

use statrs::function::erf::erfc;

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian density with standard deviation `sd` evaluated at offset `z`.
pub fn normal_pdf(z: f64, sd: f64) -> f64 {
    let u = z / sd;
    FRAC_1_SQRT_2PI / sd * (-0.5 * u * u).exp()
}

pub fn normal_ln_pdf(z: f64, sd: f64) -> f64 {
    let u = z / sd;
    -0.5 * u * u - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Upper tail `P(Z > z)` for a centered Gaussian with standard deviation `sd`.
pub fn normal_sf(z: f64, sd: f64) -> f64 {
    0.5 * erfc(z / (sd * std::f64::consts::SQRT_2))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with the n - 1 denominator; 0 when n < 2.
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    sample_sd(v) / (v.len() as f64).sqrt()
}

pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// `ln(sum(exp(terms)))` without overflow.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
