use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::std_cdf;

use super::kde::{kde, NormalMixture};

/// Minimum number of base observations for a check on study data.
pub const CLT_MIN_OBS: usize = 30;

/// Simulated versus analytic sampling distribution of `(mean, prev₋₂, prev₋₃)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub reps: usize,
    pub analytic_mean: [f64; 3],
    pub analytic_cov: [[f64; 3]; 3],
    pub empirical_mean: [f64; 3],
    pub empirical_cov: [[f64; 3]; 3],
    /// Kolmogorov–Smirnov distance per statistic.
    pub ks: [f64; 3],
    /// Largest relative error of the empirical mean vector.
    pub max_rel_mean_error: f64,
    /// Largest relative error of the empirical covariance entries.
    pub max_rel_cov_error: f64,
}

/// Summaries of one simple random sample of size `n`.
pub fn sample_summaries<R: Rng + ?Sized>(density: &NormalMixture, n: usize, rng: &mut R) -> [f64; 3] {
    let mut out = [0.0; 3];
    for _ in 0..n {
        let z = density.sample(rng);
        out[0] += z;
        if z <= -2.0 {
            out[1] += 1.0;
        }
        if z <= -3.0 {
            out[2] += 1.0;
        }
    }
    out.map(|v| v / n as f64)
}

/// Sample mean vector and covariance (divisor `reps − 1`) of replicate summaries.
pub fn empirical_moments(samples: &[[f64; 3]]) -> ([f64; 3], [[f64; 3]; 3]) {
    let r = samples.len() as f64;
    let mut mean = [0.0; 3];
    for s in samples {
        for k in 0..3 {
            mean[k] += s[k] / r;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for s in samples {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (r - 1.0);
            }
        }
    }
    (mean, cov)
}

/// Relative error, or absolute error when the reference is within `floor` of zero.
pub fn relative_error(value: f64, reference: f64, floor: f64) -> f64 {
    if reference.abs() > floor {
        ((value - reference) / reference).abs()
    } else {
        (value - reference).abs()
    }
}

/// KS distance between a sample and `N(mu, sd²)`.
pub fn ks_normal(sample: &[f64], mu: f64, sd: f64) -> f64 {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = std_cdf((v - mu) / sd);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// KS distance between sample proportions `k/n` and `N(mu, sd²)` evaluated with a
/// half-step continuity correction, i.e. against the normal approximation of the lattice
/// distribution.
pub fn ks_normal_lattice(sample: &[f64], n: usize, mu: f64, sd: f64) -> f64 {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let total = x.len() as f64;
    let half = 0.5 / n as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < x.len() {
        let v = x[i];
        let below = i as f64 / total;
        while i < x.len() && x[i] == v {
            i += 1;
        }
        let at = i as f64 / total;
        d = d.max((at - std_cdf((v + half - mu) / sd)).abs());
        d = d.max((below - std_cdf((v - half - mu) / sd)).abs());
    }
    d
}

/// Compares `reps` simulated samples of size `n` from `density` with the analytic normal
/// approximation.
pub fn clt_check<R: Rng + ?Sized>(density: &NormalMixture, n: usize, reps: usize, rng: &mut R) -> Result<CltReport> {
    if n == 0 || reps < 2 {
        return Err(Error::InvalidArgument("need n ≥ 1 and at least two replicates".into()));
    }
    let samples: Vec<[f64; 3]> = (0..reps).map(|_| sample_summaries(density, n, rng)).collect();
    let (analytic_mean, analytic_cov) = density.summary_moments(n as f64);
    let (empirical_mean, empirical_cov) = empirical_moments(&samples);
    let column = |k: usize| samples.iter().map(|s| s[k]).collect::<Vec<_>>();
    let sd = |k: usize| analytic_cov[k][k].sqrt();
    let ks = [
        ks_normal(&column(0), analytic_mean[0], sd(0)),
        ks_normal_lattice(&column(1), n, analytic_mean[1], sd(1)),
        ks_normal_lattice(&column(2), n, analytic_mean[2], sd(2)),
    ];
    let floor = 1e-5;
    let max_rel_mean_error = (0..3)
        .map(|k| relative_error(empirical_mean[k], analytic_mean[k], floor))
        .fold(0.0, f64::max);
    let max_rel_cov_error = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| relative_error(empirical_cov[i][j], analytic_cov[i][j], floor))
        .fold(0.0, f64::max);
    Ok(CltReport {
        n,
        reps,
        analytic_mean,
        analytic_cov,
        empirical_mean,
        empirical_cov,
        ks,
        max_rel_mean_error,
        max_rel_cov_error,
    })
}

/// Check on a study's values: kernel density estimate of the values, then `clt_check`.
pub fn clt_check_values(
    values: &[f64],
    weights: Option<&[f64]>,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<CltReport> {
    if values.len() < CLT_MIN_OBS {
        return Err(Error::InvalidArgument(format!(
            "{} observations; at least {CLT_MIN_OBS} are needed",
            values.len()
        )));
    }
    let density = kde(values, weights)?;
    clt_check(&density, n, reps, &mut ChaCha20Rng::seed_from_u64(seed))
}
