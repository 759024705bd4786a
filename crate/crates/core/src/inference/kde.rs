use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{full_moments, kish_deff};
use crate::normal::std_cdf;

use super::simulate::draw_mixture;
use super::summary::quantile;

/// Normal mixture with free (unordered, possibly repeated) component locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMixture {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Sum to one.
    pub weights: Vec<f64>,
}

impl NormalMixture {
    pub fn new(means: Vec<f64>, sds: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != sds.len() || means.len() != weights.len() {
            return Err(Error::InvalidArgument(
                "mixture parts must be nonempty and of equal length".into(),
            ));
        }
        if sds.iter().any(|s| !(*s > 0.0)) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain(
                "mixture sds must be positive and weights nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mixture weights sum to {total}")));
        }
        Ok(Self { means, sds, weights })
    }

    pub fn mean(&self) -> f64 {
        self.means.iter().zip(&self.weights).map(|(m, w)| m * w).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.means
            .iter()
            .zip(&self.sds)
            .zip(&self.weights)
            .map(|((m, s), w)| w * ((m - mu).powi(2) + s * s))
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.means
            .iter()
            .zip(&self.sds)
            .zip(&self.weights)
            .map(|((m, s), w)| w * std_cdf((x - m) / s))
            .sum()
    }

    /// Analytic mean vector and covariance of `(mean, prev₋₂, prev₋₃)` for samples of size `n`.
    pub fn summary_moments(&self, n: f64) -> ([f64; 3], [[f64; 3]; 3]) {
        let f = full_moments(&self.means, &self.sds, &self.weights, n);
        (f.mu, f.sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        draw_mixture(&self.means, &self.sds, &self.weights, rng)
    }
}

fn normalized(values: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(
            "a density estimate needs at least two values".into(),
        ));
    }
    let w = match weights {
        Some(w) if w.len() != values.len() => {
            return Err(Error::InvalidArgument("values and weights differ in length".into()));
        }
        Some(w) if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) => {
            return Err(Error::Domain("kernel weights must be positive".into()));
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; values.len()],
    };
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Gaussian kernel density estimate with a fixed bandwidth, as a normal mixture with one
/// component per value.
pub fn kde_with_bandwidth(values: &[f64], weights: Option<&[f64]>, bandwidth: f64) -> Result<NormalMixture> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Domain(format!("bandwidth {bandwidth} must be positive")));
    }
    let w = normalized(values, weights)?;
    NormalMixture::new(values.to_vec(), vec![bandwidth; values.len()], w)
}

/// Silverman's rule `0.9·min(sd, IQR/1.34)·n^{-1/5}` with the Kish effective size for `n`.
pub fn silverman_bandwidth(values: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    let w = normalized(values, weights)?;
    let mean: f64 = values.iter().zip(&w).map(|(v, w)| v * w).sum();
    let var: f64 = values.iter().zip(&w).map(|(v, w)| w * (v - mean).powi(2)).sum();
    if !(var > 0.0) {
        return Err(Error::Domain("values have zero variance".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let sd = var.sqrt();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let n_eff = values.len() as f64 / kish_deff(&w);
    Ok(0.9 * spread * n_eff.powf(-0.2))
}

/// Kernel density estimate with the plug-in bandwidth.
pub fn kde(values: &[f64], weights: Option<&[f64]>) -> Result<NormalMixture> {
    let h = silverman_bandwidth(values, weights)?;
    kde_with_bandwidth(values, weights, h)
}
