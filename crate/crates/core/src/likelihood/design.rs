//! Design effects of weighted prevalence estimators and ESS imputation.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::MicroObs;

/// Cutoffs −4, −3.5, …, 4 at which prevalence design effects are evaluated.
pub fn deff_cutoffs() -> impl Iterator<Item = f64> {
    (0..=16).map(|i| -4.0 + 0.5 * i as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignEffect {
    /// Median over nondegenerate cutoffs (1 when none remain).
    pub deff: f64,
    /// `(cutoff, deff)` for every cutoff with sample prevalence strictly inside (0, 1).
    pub per_cutoff: Vec<(f64, f64)>,
    pub clustered: bool,
    /// Set when every cutoff was degenerate and the fallback of 1 was used.
    pub warning: Option<String>,
}

impl DesignEffect {
    /// ESS implied for `n` observations.
    pub fn ess(&self, n: usize) -> f64 {
        n as f64 / self.deff
    }
}

/// Kish weighting effect `n Σω² / (Σω)²`.
pub fn kish_deff(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    n * s2 / (s * s)
}

/// Linearized with-replacement variance of the weighted prevalence below `x`, divided by
/// its simple-random-sampling variance `p(1 − p)/n`. `None` when the sample prevalence is
/// 0 or 1.
fn clustered_deff_at(values: &[f64], weights: &[f64], cluster: &[usize], n_clusters: usize, x: f64) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    let hits: f64 = values
        .iter()
        .zip(weights)
        .filter(|(v, _)| **v <= x)
        .map(|(_, w)| w)
        .sum();
    let p = hits / total;
    if p <= 0.0 || p >= 1.0 {
        return None;
    }
    let mut resid = vec![0.0; n_clusters];
    for ((&v, &w), &c) in values.iter().zip(weights).zip(cluster) {
        let y = if v <= x { 1.0 } else { 0.0 };
        resid[c] += w * (y - p);
    }
    let k = n_clusters as f64;
    let var = k / (k - 1.0) * resid.iter().map(|r| r * r).sum::<f64>() / (total * total);
    let srs = p * (1.0 - p) / values.len() as f64;
    Some(var / srs)
}

/// Median design effect of a micro study over the prevalence cutoffs. Cluster labels are
/// used when every observation carries one and there are at least two clusters.
pub fn estimate_design_effect(obs: &[MicroObs]) -> Result<DesignEffect> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("design effect of an empty sample".into()));
    }
    if let Some(o) = obs.iter().find(|o| !(o.weight > 0.0 && o.weight.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "survey weight {} must be positive",
            o.weight
        )));
    }
    let values: Vec<f64> = obs.iter().map(|o| o.value).collect();
    let weights: Vec<f64> = obs.iter().map(|o| o.weight).collect();

    let mut ids: HashMap<&str, usize> = HashMap::new();
    let labels: Option<Vec<usize>> = obs
        .iter()
        .map(|o| {
            o.cluster.as_deref().map(|c| {
                let next = ids.len();
                *ids.entry(c).or_insert(next)
            })
        })
        .collect();
    let labels = labels.filter(|_| ids.len() >= 2);
    let clustered = labels.is_some();

    let kish = kish_deff(&weights);
    let per_cutoff: Vec<(f64, f64)> = deff_cutoffs()
        .filter_map(|x| {
            let d = match &labels {
                Some(l) => clustered_deff_at(&values, &weights, l, ids.len(), x)?,
                None => {
                    let hits = values.iter().filter(|&&v| v <= x).count();
                    if hits == 0 || hits == values.len() {
                        return None;
                    }
                    kish
                }
            };
            Some((x, d))
        })
        .collect();

    if per_cutoff.is_empty() {
        return Ok(DesignEffect {
            deff: 1.0,
            per_cutoff,
            clustered,
            warning: Some("every prevalence cutoff is degenerate; design effect set to 1".into()),
        });
    }
    let mut ds: Vec<f64> = per_cutoff.iter().map(|(_, d)| *d).collect();
    let deff = median(&mut ds).expect("nonempty");
    if !(deff > 0.0 && deff.is_finite()) {
        return Err(Error::numeric("design effect", format!("median design effect {deff}")));
    }
    Ok(DesignEffect {
        deff,
        per_cutoff,
        clustered,
        warning: None,
    })
}

/// Median (mean of the middle pair for even counts); `None` for an empty slice.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Dataset-level median of per-study design effects.
pub fn median_design_effect(deffs: &[f64]) -> Result<f64> {
    let mut v = deffs.to_vec();
    median(&mut v)
        .ok_or_else(|| Error::Config("no micro studies to estimate a design effect from; supply median_deff".into()))
}

pub fn impute_ess(nominal_n: u64, median_deff: f64) -> Result<f64> {
    if nominal_n == 0 {
        return Err(Error::InvalidArgument("nominal sample size must be positive".into()));
    }
    if !(median_deff > 0.0 && median_deff.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "design effect {median_deff} must be positive"
        )));
    }
    Ok(nominal_n as f64 / median_deff)
}
