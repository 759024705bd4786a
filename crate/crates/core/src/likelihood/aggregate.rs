//! Joint normal approximation to the sampling distribution of a study's reported
//! mean and lower-tail prevalences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{check_pair, tail_terms, MixtureBasis, WeightVector, TAIL_FLOOR};

/// A reported summary statistic, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Prev2,
    Prev3,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::Mean, Statistic::Prev2, Statistic::Prev3];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Cutoff of a prevalence statistic.
    pub fn cutoff(self) -> Option<f64> {
        match self {
            Statistic::Mean => None,
            Statistic::Prev2 => Some(-2.0),
            Statistic::Prev3 => Some(-3.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Prev2 => "prev2",
            Statistic::Prev3 => "prev3",
        }
    }
}

/// Mean vector and covariance (already divided by the ESS) of the reported statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMoments {
    pub stats: Vec<Statistic>,
    pub mu: Vec<f64>,
    /// Row-major `d × d`.
    pub sigma: Vec<Vec<f64>>,
    /// A prevalence hit the probability floor and was clamped.
    pub degenerate: bool,
}

/// Full 3 × 3 moments in canonical order `(mean, prev2, prev3)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FullMoments {
    pub mu: [f64; 3],
    pub sigma: [[f64; 3]; 3],
    pub degenerate: bool,
}

pub(crate) fn full_moments(thetas: &[f64], sigmas: &[f64], w: &[f64], ess: f64) -> FullMoments {
    let mut mean = 0.0;
    for (&th, &wk) in thetas.iter().zip(w) {
        mean += wk * th;
    }
    let var: f64 = thetas
        .iter()
        .zip(sigmas)
        .zip(w)
        .map(|((&th, &s), &wk)| wk * ((th - mean) * (th - mean) + s * s))
        .sum();

    let mut degenerate = false;
    let mut tail = |x: f64| {
        let (p, first) = tail_terms(thetas, sigmas, w, x);
        let clamped = p.clamp(TAIL_FLOOR, 1.0 - TAIL_FLOOR);
        if clamped != p {
            degenerate = true;
        }
        // p (θ̃_x − θ) = ∫_{−∞}^x y f − p θ
        (clamped, first - p * mean)
    };
    let (p2, c2) = tail(-2.0);
    let (p3, c3) = tail(-3.0);

    let n = ess;
    let sigma = [
        [var / n, c2 / n, c3 / n],
        [c2 / n, p2 * (1.0 - p2) / n, p3 * (1.0 - p2) / n],
        [c3 / n, p3 * (1.0 - p2) / n, p3 * (1.0 - p3) / n],
    ];
    FullMoments {
        mu: [mean, p2, p3],
        sigma,
        degenerate,
    }
}

/// Moments of the reported subset of `(mean, prev₋₂, prev₋₃)` for a sample of size `ess`.
pub fn aggregate_moments(
    basis: &MixtureBasis<f64>,
    weights: &WeightVector<f64>,
    reported: &[Statistic],
    ess: f64,
) -> Result<AggregateMoments> {
    check_pair(basis, weights)?;
    if !(ess > 0.0 && ess.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "effective sample size {ess} must be positive"
        )));
    }
    if reported.is_empty() {
        return Err(Error::InvalidArgument("no reported statistics".into()));
    }
    let full = full_moments(basis.thetas(), basis.sigmas(), weights.as_slice(), ess);
    let mut stats = reported.to_vec();
    stats.sort();
    stats.dedup();
    let idx: Vec<usize> = stats.iter().map(|s| s.index()).collect();
    Ok(AggregateMoments {
        mu: idx.iter().map(|&i| full.mu[i]).collect(),
        sigma: idx
            .iter()
            .map(|&i| idx.iter().map(|&j| full.sigma[i][j]).collect())
            .collect(),
        stats,
        degenerate: full.degenerate,
    })
}

/// In-place Cholesky of a small SPD matrix; `None` when not positive definite.
fn cholesky<const N: usize>(a: &[[f64; N]; N], d: usize) -> Option<[[f64; N]; N]> {
    let mut l = [[0.0; N]; N];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Log density of `N(mu, sigma)` at `y` over the leading `d ≤ 3` coordinates, with one
/// jittered retry.
pub(crate) fn mvn_logpdf_small(y: &[f64; 3], mu: &[f64; 3], sigma: &[[f64; 3]; 3], d: usize) -> Option<f64> {
    let l = cholesky(sigma, d).or_else(|| {
        let trace: f64 = (0..d).map(|i| sigma[i][i]).sum();
        let jitter = 1e-10 * trace / d as f64;
        let mut s = *sigma;
        for (i, row) in s.iter_mut().enumerate().take(d) {
            row[i] += jitter;
        }
        cholesky(&s, d)
    })?;
    let mut z = [0.0; 3];
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for i in 0..d {
        let mut s = y[i] - mu[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
        quad += z[i] * z[i];
        log_det += 2.0 * l[i][i].ln();
    }
    Some(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
}

/// Observed summary vector packed for [`mvn_logpdf_small`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PackedSummaries {
    pub idx: [usize; 3],
    pub observed: [f64; 3],
    pub d: usize,
}

impl PackedSummaries {
    pub fn new(values: &[(Statistic, f64)]) -> Self {
        let mut v = values.to_vec();
        v.sort_by_key(|(s, _)| *s);
        let mut p = Self {
            idx: [0; 3],
            observed: [0.0; 3],
            d: v.len(),
        };
        for (k, (s, y)) in v.into_iter().enumerate() {
            p.idx[k] = s.index();
            p.observed[k] = y;
        }
        p
    }

    pub fn loglik(&self, full: &FullMoments) -> Option<f64> {
        let mut mu = [0.0; 3];
        let mut sigma = [[0.0; 3]; 3];
        for a in 0..self.d {
            mu[a] = full.mu[self.idx[a]];
            for b in 0..self.d {
                sigma[a][b] = full.sigma[self.idx[a]][self.idx[b]];
            }
        }
        mvn_logpdf_small(&self.observed, &mu, &sigma, self.d)
    }
}
