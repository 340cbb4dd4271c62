//! Monte Carlo estimates, running means and bootstrap standard errors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::SeedKey;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl Estimate {
    pub fn new(mean: f64, std_error: f64, n_samples: usize) -> Self {
        Estimate { mean, std_error, n_samples }
    }

    /// Exact value, zero error.
    pub fn exact(value: f64) -> Self {
        Estimate { mean: value, std_error: 0.0, n_samples: 1 }
    }

    /// Mean and `s / sqrt(n)` of i.i.d. samples.
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, var) = mean_var(xs);
        let n = xs.len();
        let se = if n > 1 { (var / n as f64).sqrt() } else { 0.0 };
        Estimate { mean, std_error: se, n_samples: n }
    }

    /// Pools two independent estimates of the same quantity as if their
    /// samples had been aggregated.
    pub fn merge(&self, other: &Estimate) -> Estimate {
        let (n1, n2) = (self.n_samples as f64, other.n_samples as f64);
        let n = n1 + n2;
        let mean = (n1 * self.mean + n2 * other.mean) / n;
        let se = ((n1 * self.std_error).powi(2) + (n2 * other.std_error).powi(2)).sqrt() / n;
        Estimate { mean, std_error: se, n_samples: self.n_samples + other.n_samples }
    }

    /// `(mean - z se, mean + z se)`.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.mean - z * self.std_error, self.mean + z * self.std_error)
    }

    /// Standardized distance from `target`. Zero error gives 0 on an exact hit
    /// and infinity otherwise.
    pub fn z_against(&self, target: f64) -> f64 {
        z_score(self.mean - target, self.std_error)
    }
}

pub fn z_score(difference: f64, std_error: f64) -> f64 {
    if std_error > 0.0 {
        difference / std_error
    } else if difference == 0.0 {
        0.0
    } else {
        difference.signum() * f64::INFINITY
    }
}

/// Running mean (Welford). A constant input sequence yields that constant
/// bit-exactly, which the zero-variance channels rely on.
pub fn mean(xs: &[f64]) -> f64 {
    mean_var(xs).0
}

/// Welford mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let mut m = 0.0;
    let mut s = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        let d = x - m;
        m += d / (k + 1) as f64;
        s += d * (x - m);
    }
    let var = if xs.len() > 1 { s / (xs.len() - 1) as f64 } else { 0.0 };
    (m, var)
}

/// Running mean over an iterator without collecting.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunningMean {
    count: usize,
    mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Nonparametric bootstrap over one or more independent blocks of
/// realizations. `stat` receives one resampled index list per block.
pub fn bootstrap_std(
    resamples: usize,
    block_sizes: &[usize],
    key: SeedKey,
    mut stat: impl FnMut(&[Vec<usize>]) -> f64,
) -> f64 {
    let mut rng = key.stream();
    let mut idx: Vec<Vec<usize>> = block_sizes.iter().map(|&n| vec![0; n]).collect();
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for (block, &n) in idx.iter_mut().zip(block_sizes) {
            for slot in block.iter_mut() {
                *slot = rng.random_range(0..n);
            }
        }
        values.push(stat(&idx));
    }
    mean_var(&values).1.sqrt()
}

/// Mean of `xs` over the given resample indices.
pub fn resampled_mean(xs: &[f64], idx: &[usize]) -> f64 {
    let mut m = RunningMean::default();
    for &i in idx {
        m.push(xs[i]);
    }
    m.mean()
}
