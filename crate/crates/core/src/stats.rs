//! Small statistics toolkit for the Monte Carlo harness.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
pub const GUMBEL_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;

pub fn gumbel_cdf(z: f64) -> f64 {
    (-(-z).exp()).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Standard error of the mean.
    pub std_error: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        if n == 0 {
            return Summary { n, mean: f64::NAN, variance: f64::NAN, std_error: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Summary { n, mean, variance, std_error: (variance / n as f64).sqrt() }
    }

    /// Standard error of the sample variance, from the fourth central moment.
    pub fn variance_std_error(xs: &[f64]) -> f64 {
        let s = Summary::of(xs);
        let n = xs.len() as f64;
        let m4 = xs.iter().map(|x| (x - s.mean).powi(4)).sum::<f64>() / n;
        ((m4 - s.variance * s.variance * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
    }
}

/// Proportion with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: usize,
    pub trials: usize,
    pub estimate: f64,
    pub std_error: f64,
}

impl Proportion {
    pub fn new(successes: usize, trials: usize) -> Proportion {
        let p = if trials == 0 { f64::NAN } else { successes as f64 / trials as f64 };
        Proportion { successes, trials, estimate: p, std_error: (p * (1.0 - p) / trials as f64).sqrt() }
    }
}

/// Kolmogorov-Smirnov distance between the empirical law of `xs` and a continuous CDF.
pub fn ks_distance(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(statistic)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness of fit; bins with expected count below 5 are merged into their neighbour.
pub fn chi_square_gof(observed: &[f64], expected: &[f64], fitted_params: usize) -> ChiSquareTest {
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&oi, &ei) in observed.iter().zip(expected) {
        o += oi;
        e += ei;
        if e >= 5.0 {
            bins.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => bins.push((o, e)),
        }
    }
    let statistic: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = bins.len().saturating_sub(1 + fitted_params);
    ChiSquareTest { statistic, dof, p_value: chi_square_sf(statistic, dof) }
}

/// Two-sample chi-square homogeneity test on histograms over the same bins.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> ChiSquareTest {
    let ta: u64 = a.iter().sum();
    let tb: u64 = b.iter().sum();
    let (ka, kb) = ((tb as f64 / ta as f64).sqrt(), (ta as f64 / tb as f64).sqrt());
    // Merge sparse bins so every pooled bin has at least 10 observations.
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut x, mut y) = (0.0, 0.0);
    for (&ai, &bi) in a.iter().zip(b) {
        x += ai as f64;
        y += bi as f64;
        if x + y >= 10.0 {
            pooled.push((x, y));
            x = 0.0;
            y = 0.0;
        }
    }
    if x + y > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += x;
                last.1 += y;
            }
            None => pooled.push((x, y)),
        }
    }
    let statistic: f64 = pooled.iter().map(|(x, y)| (ka * x - kb * y).powi(2) / (x + y)).sum();
    let dof = pooled.len().saturating_sub(1);
    ChiSquareTest { statistic, dof, p_value: chi_square_sf(statistic, dof) }
}

pub fn poisson_pmf(k: usize, mean: f64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (k as f64 * mean.ln() - mean - statrs::function::gamma::ln_gamma(k as f64 + 1.0)).exp()
}
