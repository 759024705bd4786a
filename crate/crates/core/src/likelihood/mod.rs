//! Data log-likelihood: ESS-normalized weighted microdata and joint normal summaries.

mod aggregate;
mod design;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{check_pair, logpdf_unchecked, MixtureBasis, WeightVector};
use crate::model::{weights_into, HierarchyConfig, ModelContext, ModelState, Stratum, StudyDesign, WeightScratch};
use crate::normal::std_log_pdf;

pub use aggregate::{aggregate_moments, AggregateMoments, Statistic};
pub(crate) use aggregate::{full_moments, PackedSummaries};
pub use design::{
    deff_cutoffs, estimate_design_effect, impute_ess, kish_deff, median, median_design_effect, DesignEffect,
};

/// One child-level observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroObs {
    pub value: f64,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<String>,
}

impl MicroObs {
    pub fn new(value: f64, weight: f64) -> Self {
        Self {
            value,
            weight,
            cluster: None,
        }
    }
}

/// Reported summaries of an aggregate study; prevalences are fractions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summaries {
    pub mean: Option<f64>,
    pub prev2: Option<f64>,
    pub prev3: Option<f64>,
}

impl Summaries {
    pub fn get(&self, stat: Statistic) -> Option<f64> {
        match stat {
            Statistic::Mean => self.mean,
            Statistic::Prev2 => self.prev2,
            Statistic::Prev3 => self.prev3,
        }
    }

    pub fn set(&mut self, stat: Statistic, value: Option<f64>) {
        match stat {
            Statistic::Mean => self.mean = value,
            Statistic::Prev2 => self.prev2 = value,
            Statistic::Prev3 => self.prev3 = value,
        }
    }

    /// Reported `(statistic, value)` pairs in canonical order.
    pub fn reported(&self) -> Vec<(Statistic, f64)> {
        Statistic::ALL
            .iter()
            .filter_map(|&s| self.get(s).map(|v| (s, v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Micro,
    #[serde(rename = "agg", alias = "aggregate")]
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StudyData {
    Micro(Vec<MicroObs>),
    Aggregate { summaries: Summaries, nominal_n: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub country: String,
    pub year: i32,
    pub national: bool,
    pub full_age: bool,
    pub stratum: Stratum,
    pub data: StudyData,
    /// Effective sample size; 0 until estimated or imputed.
    pub ess: f64,
}

impl StudyRecord {
    pub fn kind(&self) -> StudyKind {
        match self.data {
            StudyData::Micro(_) => StudyKind::Micro,
            StudyData::Aggregate { .. } => StudyKind::Aggregate,
        }
    }

    pub fn nominal_n(&self) -> u64 {
        match &self.data {
            StudyData::Micro(obs) => obs.len() as u64,
            StudyData::Aggregate { nominal_n, .. } => *nominal_n,
        }
    }

    /// Invariant violations, empty when the record is valid. ESS is not checked while it
    /// is still unset (0).
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.data {
            StudyData::Micro(obs) => {
                if obs.is_empty() {
                    out.push("micro study has no observations".into());
                }
                for (i, o) in obs.iter().enumerate() {
                    if !o.value.is_finite() {
                        out.push(format!("observation {} has non-finite value", i + 1));
                    }
                    if !(o.weight > 0.0 && o.weight.is_finite()) {
                        out.push(format!("observation {} has nonpositive weight {}", i + 1, o.weight));
                    }
                }
            }
            StudyData::Aggregate { summaries, nominal_n } => {
                if summaries.reported().is_empty() {
                    out.push("aggregate study reports no summary".into());
                }
                if summaries.mean.is_some_and(|m| !m.is_finite()) {
                    out.push("mean is not finite".into());
                }
                for (name, p) in [("prev2", summaries.prev2), ("prev3", summaries.prev3)] {
                    if let Some(p) = p {
                        if !(0.0..=1.0).contains(&p) {
                            out.push(format!("{name} = {p} outside [0, 1]"));
                        }
                    }
                }
                if let (Some(p2), Some(p3)) = (summaries.prev2, summaries.prev3) {
                    if p3 > p2 {
                        out.push(format!("prev3 = {p3} exceeds prev2 = {p2}"));
                    }
                }
                if *nominal_n == 0 {
                    out.push("nominal sample size must be positive".into());
                }
            }
        }
        if self.ess != 0.0 {
            if !(self.ess > 0.0 && self.ess.is_finite()) {
                out.push(format!("effective sample size {} must be positive", self.ess));
            } else if self.ess > 10.0 * self.nominal_n() as f64 {
                out.push(format!(
                    "effective sample size {} exceeds ten times the nominal size {}",
                    self.ess,
                    self.nominal_n()
                ));
            }
        }
        out
    }

    /// Hierarchy indices and effect switches used when assembling scores for this record.
    pub fn design(&self, hier: &HierarchyConfig) -> Result<StudyDesign> {
        Ok(StudyDesign {
            country: hier.country_index(&self.country)?,
            year: hier.year_index(self.year)?,
            national: self.national,
            full_age: self.full_age,
            stratum: self.stratum,
        })
    }

    fn ess_checked(&self) -> Result<f64> {
        if !(self.ess > 0.0 && self.ess.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "study {} has no positive effective sample size",
                self.study_id
            )));
        }
        Ok(self.ess)
    }
}

/// Rescales positive weights to sum to `ess`.
pub fn normalize_weights(weights: &[f64], ess: f64) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("no weights to normalize".into()));
    }
    if !(ess > 0.0 && ess.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "effective sample size {ess} must be positive"
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("weight {w} must be positive")));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total * ess).collect())
}

/// `Σ ω_h log f(z_h)` with weights normalized to the study ESS.
pub fn micro_loglik(study: &StudyRecord, basis: &MixtureBasis<f64>, weights: &WeightVector<f64>) -> Result<f64> {
    let StudyData::Micro(obs) = &study.data else {
        return Err(Error::InvalidArgument(format!(
            "study {} is not a micro study",
            study.study_id
        )));
    };
    if obs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "study {} has no observations",
            study.study_id
        )));
    }
    check_pair(basis, weights)?;
    let raw: Vec<f64> = obs.iter().map(|o| o.weight).collect();
    let omega = normalize_weights(&raw, study.ess_checked()?)?;
    Ok(obs
        .iter()
        .zip(&omega)
        .map(|(o, w)| w * logpdf_unchecked(o.value, basis.thetas(), basis.sigmas(), weights.as_slice()))
        .sum())
}

/// Joint normal log density of the reported summaries.
pub fn aggregate_loglik(study: &StudyRecord, basis: &MixtureBasis<f64>, weights: &WeightVector<f64>) -> Result<f64> {
    let StudyData::Aggregate { summaries, .. } = &study.data else {
        return Err(Error::InvalidArgument(format!(
            "study {} is not an aggregate study",
            study.study_id
        )));
    };
    let reported = summaries.reported();
    if reported.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "study {} reports no summary",
            study.study_id
        )));
    }
    check_pair(basis, weights)?;
    let full = full_moments(basis.thetas(), basis.sigmas(), weights.as_slice(), study.ess_checked()?);
    PackedSummaries::new(&reported)
        .loglik(&full)
        .ok_or_else(|| not_pd(&study.study_id))
}

fn not_pd(id: &str) -> Error {
    Error::numeric(
        format!("aggregate likelihood of study {id}"),
        "summary covariance is not positive definite after jitter",
    )
}

pub fn study_loglik(study: &StudyRecord, basis: &MixtureBasis<f64>, weights: &WeightVector<f64>) -> Result<f64> {
    match study.kind() {
        StudyKind::Micro => micro_loglik(study, basis, weights),
        StudyKind::Aggregate => aggregate_loglik(study, basis, weights),
    }
}

/// Sum of per-study log-likelihoods at the state's study-specific weights; `ctx.designs`
/// is aligned with `studies`.
pub fn total_loglik(studies: &[StudyRecord], state: &ModelState, ctx: &ModelContext) -> Result<f64> {
    let prepared = PreparedStudies::new(studies)?;
    prepared.total(state, ctx)
}

/// Studies packed for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct PreparedStudies {
    ids: Vec<String>,
    items: Vec<Prepared>,
    /// Summation order (by study id).
    order: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) enum Prepared {
    Micro { values: Vec<f64>, omega: Vec<f64> },
    Aggregate { packed: PackedSummaries, ess: f64 },
}

/// Per-observation component densities for a fixed basis, scaled by the row maximum.
#[derive(Debug, Clone, Default)]
pub(crate) struct MicroTable {
    k: usize,
    scaled: Vec<f64>,
    offset: Vec<f64>,
}

impl Prepared {
    /// Data values on the outcome scale: microdata values or a reported mean.
    pub(crate) fn location_values(&self) -> Vec<f64> {
        match self {
            Prepared::Micro { values, .. } => values.clone(),
            Prepared::Aggregate { packed, .. } => (0..packed.d)
                .filter(|&a| packed.idx[a] == Statistic::Mean.index())
                .map(|a| packed.observed[a])
                .collect(),
        }
    }

    fn loglik(&self, thetas: &[f64], sigmas: &[f64], w: &[f64]) -> Option<f64> {
        match self {
            Prepared::Micro { values, omega } => Some(
                values
                    .iter()
                    .zip(omega)
                    .map(|(&z, &o)| o * logpdf_unchecked(z, thetas, sigmas, w))
                    .sum(),
            ),
            Prepared::Aggregate { packed, ess } => packed.loglik(&full_moments(thetas, sigmas, w, *ess)),
        }
    }

    pub(crate) fn micro_table(&self, thetas: &[f64], sigmas: &[f64]) -> Option<MicroTable> {
        let Prepared::Micro { values, .. } = self else {
            return None;
        };
        let k = thetas.len();
        let mut scaled = Vec::with_capacity(values.len() * k);
        let mut offset = Vec::with_capacity(values.len());
        let log_sigma: Vec<f64> = sigmas.iter().map(|s| s.ln()).collect();
        let mut row = vec![0.0; k];
        for &z in values {
            let mut max = f64::NEG_INFINITY;
            for m in 0..k {
                row[m] = std_log_pdf((z - thetas[m]) / sigmas[m]) - log_sigma[m];
                max = max.max(row[m]);
            }
            offset.push(max);
            scaled.extend(row.iter().map(|l| (l - max).exp()));
        }
        Some(MicroTable { k, scaled, offset })
    }

    /// Micro log-likelihood from a precomputed table; falls back to the direct sum when a
    /// row underflows.
    pub(crate) fn micro_loglik_table(&self, table: &MicroTable, thetas: &[f64], sigmas: &[f64], w: &[f64]) -> f64 {
        let Prepared::Micro { values, omega } = self else {
            unreachable!("table lookup on an aggregate study");
        };
        let mut total = 0.0;
        for (h, (&z, &o)) in values.iter().zip(omega).enumerate() {
            let row = &table.scaled[h * table.k..(h + 1) * table.k];
            let s: f64 = row.iter().zip(w).map(|(d, wk)| d * wk).sum();
            total += o * if s > 0.0 {
                table.offset[h] + s.ln()
            } else {
                logpdf_unchecked(z, thetas, sigmas, w)
            };
        }
        total
    }
}

impl PreparedStudies {
    pub fn new(studies: &[StudyRecord]) -> Result<Self> {
        let mut items = Vec::with_capacity(studies.len());
        for s in studies {
            let ess = s.ess_checked()?;
            items.push(match &s.data {
                StudyData::Micro(obs) => {
                    let raw: Vec<f64> = obs.iter().map(|o| o.weight).collect();
                    Prepared::Micro {
                        values: obs.iter().map(|o| o.value).collect(),
                        omega: normalize_weights(&raw, ess)?,
                    }
                }
                StudyData::Aggregate { summaries, .. } => {
                    let reported = summaries.reported();
                    if reported.is_empty() {
                        return Err(Error::InvalidArgument(format!(
                            "study {} reports no summary",
                            s.study_id
                        )));
                    }
                    Prepared::Aggregate {
                        packed: PackedSummaries::new(&reported),
                        ess,
                    }
                }
            });
        }
        let ids: Vec<String> = studies.iter().map(|s| s.study_id.clone()).collect();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        Ok(Self { ids, items, order })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub(crate) fn item(&self, i: usize) -> &Prepared {
        &self.items[i]
    }

    /// Log-likelihood of study `i` at explicit basis and weights.
    pub fn study(&self, i: usize, thetas: &[f64], sigmas: &[f64], w: &[f64]) -> Result<f64> {
        self.items[i]
            .loglik(thetas, sigmas, w)
            .filter(|v| !v.is_nan())
            .ok_or_else(|| not_pd(&self.ids[i]))
    }

    /// Per-study log-likelihoods at the state's study weights.
    pub fn per_study(&self, state: &ModelState, ctx: &ModelContext) -> Result<Vec<f64>> {
        if ctx.designs.len() != self.items.len() {
            return Err(Error::InvalidArgument(format!(
                "{} study designs for {} studies",
                ctx.designs.len(),
                self.items.len()
            )));
        }
        let mut scratch = WeightScratch::default();
        let mut w = Vec::new();
        let mut out = vec![0.0; self.items.len()];
        for (i, d) in ctx.designs.iter().enumerate() {
            weights_into(
                &state.effects,
                &ctx.hier,
                &ctx.options,
                d.country,
                d.year,
                d.stratum,
                Some((i, *d)),
                &mut scratch,
                &mut w,
            )?;
            out[i] = self.study(i, &state.thetas, &state.sigmas, &w)?;
        }
        Ok(out)
    }

    /// Sum over studies in study-id order.
    pub fn sum(&self, per_study: &[f64]) -> f64 {
        self.order.iter().map(|&i| per_study[i]).sum()
    }

    pub fn total(&self, state: &ModelState, ctx: &ModelContext) -> Result<f64> {
        Ok(self.sum(&self.per_study(state, ctx)?))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use nalgebra::{DMatrix, DVector, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::mixture::stick_break;
    use crate::model::{ModelOptions, PriorBounds};

    fn basis3() -> MixtureBasis<f64> {
        MixtureBasis::new(vec![-2.5, -1.0, 0.5], vec![0.8, 1.0, 0.9], 3.0).unwrap()
    }

    fn w3() -> WeightVector<f64> {
        WeightVector::new(vec![0.2, 0.5, 0.3]).unwrap()
    }

    fn micro(id: &str, obs: Vec<(f64, f64)>, ess: f64) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            country: "A".into(),
            year: 2000,
            national: true,
            full_age: true,
            stratum: Stratum::All,
            data: StudyData::Micro(obs.into_iter().map(|(v, w)| MicroObs::new(v, w)).collect()),
            ess,
        }
    }

    fn agg(id: &str, s: Summaries, ess: f64) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            country: "A".into(),
            year: 2000,
            national: true,
            full_age: true,
            stratum: Stratum::All,
            data: StudyData::Aggregate {
                summaries: s,
                nominal_n: 1000,
            },
            ess,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[1.0; 100], 50.0).unwrap(), vec![0.5; 100]);
        assert_eq!(normalize_weights(&[1.0, 3.0], 2.0).unwrap(), vec![0.5, 1.5]);
        assert!(normalize_weights(&[1.0, 0.0], 2.0).is_err());
        assert!(normalize_weights(&[1.0], -1.0).is_err());
        assert!(normalize_weights(&[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn normalize_preserves_ratios(ws in prop::collection::vec(0.01f64..100.0, 1..50), ess in 0.5f64..5000.0) {
            let out = normalize_weights(&ws, ess).unwrap();
            let total: f64 = out.iter().sum();
            prop_assert!((total - ess).abs() < 1e-9 * ess.max(1.0));
            for (o, w) in out.iter().zip(&ws) {
                prop_assert!((o / w - out[0] / ws[0]).abs() < 1e-9 * (out[0] / ws[0]));
            }
        }
    }

    #[test]
    fn micro_loglik_examples() {
        let b = basis3();
        let w = w3();
        let one = micro("s", vec![(-0.7, 1.0)], 1.0);
        let direct = crate::mixture::mixture_logpdf(-0.7, &b, &w).unwrap();
        assert!((micro_loglik(&one, &b, &w).unwrap() - direct).abs() < 1e-14);

        let obs = vec![(-1.2, 2.0), (0.4, 1.0), (-2.9, 3.0)];
        let base = micro("s", obs.clone(), 5.0);
        let dup = micro("s", obs.iter().chain(&obs).map(|&(v, wt)| (v, wt / 2.0)).collect(), 5.0);
        let l0 = micro_loglik(&base, &b, &w).unwrap();
        assert!((micro_loglik(&dup, &b, &w).unwrap() - l0).abs() < 1e-12);
        let doubled = micro("s", obs, 10.0);
        assert_eq!(micro_loglik(&doubled, &b, &w).unwrap(), 2.0 * l0);

        assert!(micro_loglik(&micro("e", vec![], 1.0), &b, &w).is_err());
        assert!(micro_loglik(
            &agg(
                "a",
                Summaries {
                    mean: Some(0.0),
                    ..Default::default()
                },
                5.0
            ),
            &b,
            &w
        )
        .is_err());
    }

    #[test]
    fn micro_table_matches_direct() {
        let s = micro("s", vec![(-1.2, 2.0), (0.4, 1.0), (-5.9, 3.0), (4.0, 0.5)], 3.0);
        let p = PreparedStudies::new(std::slice::from_ref(&s)).unwrap();
        let b = basis3();
        let w = w3();
        let table = p.item(0).micro_table(b.thetas(), b.sigmas()).unwrap();
        let fast = p
            .item(0)
            .micro_loglik_table(&table, b.thetas(), b.sigmas(), w.as_slice());
        assert!((fast - micro_loglik(&s, &b, &w).unwrap()).abs() < 1e-12);
    }

    /// Quadrature oracle for the unscaled moments: Var(Y), Cov(Y, 1{Y ≤ x}), P(Y ≤ x).
    fn quadrature(b: &MixtureBasis<f64>, w: &WeightVector<f64>) -> ([f64; 3], [[f64; 3]; 3]) {
        let dens = |y: f64| -> f64 {
            b.thetas()
                .iter()
                .zip(b.sigmas())
                .zip(w.as_slice())
                .map(|((t, s), wk)| {
                    wk * (-(y - t).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
                })
                .sum()
        };
        // composite Simpson on [a, b]
        let integrate = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| -> f64 {
            let n = 100_000;
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
            }
            s * h / 3.0
        };
        let (lo, hi) = (-20.0, 20.0);
        let mean = integrate(&|y| y * dens(y), lo, hi);
        let var = integrate(&|y| (y - mean).powi(2) * dens(y), lo, hi);
        let p2 = integrate(&dens, lo, -2.0);
        let p3 = integrate(&dens, lo, -3.0);
        let c2 = integrate(&|y| (y - mean) * dens(y), lo, -2.0);
        let c3 = integrate(&|y| (y - mean) * dens(y), lo, -3.0);
        // joint indicator expectations by enumeration of the nested events
        let p23 = p3;
        (
            [mean, p2, p3],
            [
                [var, c2, c3],
                [c2, p2 - p2 * p2, p23 - p2 * p3],
                [c3, p23 - p2 * p3, p3 - p3 * p3],
            ],
        )
    }

    #[test]
    fn moments_match_quadrature() {
        let b = basis3();
        let w = w3();
        let m = aggregate_moments(&b, &w, &Statistic::ALL, 1.0).unwrap();
        let (mu, sig) = quadrature(&b, &w);
        for i in 0..3 {
            assert!((m.mu[i] - mu[i]).abs() < 1e-10, "mu {i}");
            for j in 0..3 {
                assert!((m.sigma[i][j] - sig[i][j]).abs() < 1e-10, "sigma {i}{j}");
            }
        }
        let scaled = aggregate_moments(&b, &w, &Statistic::ALL, 250.0).unwrap();
        assert!((scaled.sigma[1][2] * 250.0 - m.sigma[1][2]).abs() < 1e-15);
    }

    #[test]
    fn moments_match_simulation_within_sampling_error() {
        const N: usize = 50;
        const REPS: usize = 40_000;
        let (b, w) = (basis3(), w3());
        let m = aggregate_moments(&b, &w, &Statistic::ALL, N as f64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let comps: Vec<Normal<f64>> = b
            .thetas()
            .iter()
            .zip(b.sigmas())
            .map(|(t, s)| Normal::new(*t, *s).unwrap())
            .collect();
        let samples: Vec<[f64; 3]> = (0..REPS)
            .map(|_| {
                let mut s = [0.0; 3];
                for _ in 0..N {
                    let u: f64 = rng.random();
                    let k = if u < 0.2 {
                        0
                    } else if u < 0.7 {
                        1
                    } else {
                        2
                    };
                    let z = comps[k].sample(&mut rng);
                    s[0] += z;
                    s[1] += f64::from(u8::from(z <= -2.0));
                    s[2] += f64::from(u8::from(z <= -3.0));
                }
                s.map(|v| v / N as f64)
            })
            .collect();
        let r = REPS as f64;
        let mean: Vec<f64> = (0..3).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / r).collect();
        for i in 0..3 {
            for j in 0..3 {
                let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
                let cov = prods.iter().sum::<f64>() / (r - 1.0);
                let se = (prods.iter().map(|p| (p - cov).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt();
                assert!(
                    (cov - m.sigma[i][j]).abs() < 4.5 * se,
                    "sigma {i}{j}: {cov} vs {}",
                    m.sigma[i][j]
                );
            }
        }
    }

    #[test]
    fn single_component_covariance_example() {
        // cutoff −2 sits at the component center
        let b = MixtureBasis::new(vec![-2.0], vec![1.0], 3.0).unwrap();
        let w = WeightVector::new(vec![1.0]).unwrap();
        let m = aggregate_moments(&b, &w, &[Statistic::Mean, Statistic::Prev2], 100.0).unwrap();
        assert!((m.sigma[0][1] - -0.003_989_422_804_014_327).abs() < 1e-12);
        assert!((m.sigma[0][1] - 0.5 * (-0.797_884_560_802_865_4) / 100.0).abs() < 1e-12);
        assert!((m.sigma[1][1] - 0.25 / 100.0).abs() < 1e-15);
        assert_eq!(m.stats, vec![Statistic::Mean, Statistic::Prev2]);
    }

    #[test]
    fn cross_prevalence_reduces_to_variance_at_equal_cutoffs() {
        // the cross term p_lo (1 − p_hi) with both tails equal is p (1 − p)
        let b = MixtureBasis::new(vec![-9.0, 9.0], vec![0.5, 0.5], 3.0).unwrap();
        let w = WeightVector::new(vec![0.3, 0.7]).unwrap();
        let m = aggregate_moments(&b, &w, &[Statistic::Prev2, Statistic::Prev3], 10.0).unwrap();
        // p₋₂ = p₋₃ = 0.3 here
        assert!((m.sigma[0][1] - m.sigma[0][0]).abs() < 1e-15);
        assert!((m.sigma[1][1] - 0.3 * 0.7 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_tail_is_flagged() {
        let b = MixtureBasis::new(vec![3.0], vec![0.3], 3.0).unwrap();
        let w = WeightVector::new(vec![1.0]).unwrap();
        let m = aggregate_moments(&b, &w, &[Statistic::Prev3], 100.0).unwrap();
        assert!(m.degenerate);
        assert!(m.sigma[0][0] > 0.0);
    }

    #[test]
    fn covariance_is_psd_for_random_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let k = rng.random_range(1..6);
            let mut th: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..3.0)).collect();
            th.sort_by(f64::total_cmp);
            let sg: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..2.0)).collect();
            let alpha: Vec<f64> = (0..k - 1).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w = stick_break(&alpha).unwrap();
            let full = full_moments(&th, &sg, w.as_slice(), rng.random_range(10.0..5000.0));
            let p = full.mu[1];
            if !(0.001..0.999).contains(&p) {
                continue;
            }
            let m = DMatrix::from_fn(3, 3, |i, j| full.sigma[i][j]);
            assert_eq!(m, m.transpose());
            let trace = m.trace();
            let min = SymmetricEigen::new(m).eigenvalues.min();
            assert!(min >= -1e-12 * trace, "min eigenvalue {min}");
        }
    }

    fn dense_mvn(y: &[f64], mu: &[f64], sigma: &[Vec<f64>]) -> f64 {
        let d = y.len();
        let s = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
        let r = DVector::from_fn(d, |i, _| y[i] - mu[i]);
        let inv = s.clone().try_inverse().unwrap();
        let quad = (r.transpose() * inv * &r)[(0, 0)];
        -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad)
    }

    #[test]
    fn aggregate_loglik_examples() {
        let b = basis3();
        let w = w3();
        let ess = 340.0;
        let (mean, var) = crate::mixture::mixture_moments(&b, &w).unwrap();

        let only_mean = agg(
            "m",
            Summaries {
                mean: Some(-0.9),
                ..Default::default()
            },
            ess,
        );
        let want = -0.5 * (2.0 * std::f64::consts::PI * var / ess).ln() - 0.5 * (-0.9 - mean).powi(2) / (var / ess);
        assert!((aggregate_loglik(&only_mean, &b, &w).unwrap() - want).abs() < 1e-10);

        let mom = aggregate_moments(&b, &w, &Statistic::ALL, ess).unwrap();
        let exact = agg(
            "x",
            Summaries {
                mean: Some(mom.mu[0]),
                prev2: Some(mom.mu[1]),
                prev3: Some(mom.mu[2]),
            },
            ess,
        );
        let s = DMatrix::from_fn(3, 3, |i, j| mom.sigma[i][j]);
        let zero_quad = -0.5 * ((2.0 * std::f64::consts::PI).powi(3) * s.determinant()).ln();
        assert!((aggregate_loglik(&exact, &b, &w).unwrap() - zero_quad).abs() < 1e-9);

        let two = agg(
            "t",
            Summaries {
                prev2: Some(0.31),
                prev3: Some(0.12),
                ..Default::default()
            },
            ess,
        );
        let m2 = aggregate_moments(&b, &w, &[Statistic::Prev2, Statistic::Prev3], ess).unwrap();
        let oracle = dense_mvn(&[0.31, 0.12], &m2.mu, &m2.sigma);
        assert!((aggregate_loglik(&two, &b, &w).unwrap() - oracle).abs() < 1e-10);

        // 1-D mean likelihood uses the 3-D matrix's marginal entry
        assert!((mom.sigma[0][0] - var / ess).abs() < 1e-15);
        let m1 = aggregate_moments(&b, &w, &[Statistic::Mean], ess).unwrap();
        assert_eq!(m1.sigma[0][0], mom.sigma[0][0]);
        assert_eq!(m1.mu[0], mom.mu[0]);
    }

    #[test]
    fn design_effect_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(-1.0, 1.2).unwrap();
        let obs: Vec<MicroObs> = (0..500).map(|_| MicroObs::new(n.sample(&mut rng), 1.0)).collect();
        let d = estimate_design_effect(&obs).unwrap();
        assert!((d.deff - 1.0).abs() < 1e-12);
        assert!(!d.clustered);
        assert!((d.ess(500) - 500.0).abs() < 1e-9);

        // every value above 4: all cutoffs degenerate
        let high: Vec<MicroObs> = (0..20).map(|i| MicroObs::new(5.0 + i as f64 * 0.01, 1.0)).collect();
        let d = estimate_design_effect(&high).unwrap();
        assert_eq!(d.deff, 1.0);
        assert!(d.warning.is_some());

        // values between −0.2 and 0.2: only cutoffs 0 is nondegenerate
        let mid: Vec<MicroObs> = (0..20)
            .map(|i| MicroObs::new(-0.19 + 0.02 * i as f64, 1.0 + i as f64))
            .collect();
        let d = estimate_design_effect(&mid).unwrap();
        assert_eq!(d.per_cutoff.len(), 1);
        assert_eq!(d.per_cutoff[0].0, 0.0);
    }

    #[test]
    fn design_effect_recovers_cluster_inflation() {
        // copying design: each child takes the cluster's value with probability q, else
        // an independent draw, so every indicator has intracluster correlation q²
        let q: f64 = 0.5;
        let rho = q * q;
        let m = 10usize;
        let clusters = 40usize;
        let target = 1.0 + (m as f64 - 1.0) * rho;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base = Normal::new(-1.2, 1.3).unwrap();
        let mut total = 0.0;
        let sims = 200;
        for _ in 0..sims {
            let mut obs = Vec::with_capacity(m * clusters);
            for c in 0..clusters {
                let shared = base.sample(&mut rng);
                for _ in 0..m {
                    let v = if rng.random::<f64>() < q {
                        shared
                    } else {
                        base.sample(&mut rng)
                    };
                    obs.push(MicroObs {
                        value: v,
                        weight: 1.0,
                        cluster: Some(format!("c{c}")),
                    });
                }
            }
            let d = estimate_design_effect(&obs).unwrap();
            assert!(d.clustered);
            total += d.deff;
        }
        let mean = total / sims as f64;
        assert!((mean / target - 1.0).abs() < 0.15, "mean deff {mean} vs {target}");
    }

    #[test]
    fn ess_imputation() {
        assert_eq!(impute_ess(2000, 2.0).unwrap(), 1000.0);
        assert_eq!(impute_ess(750, 1.0).unwrap(), 750.0);
        assert!(impute_ess(10, 0.0).is_err());
        assert!(matches!(median_design_effect(&[]), Err(Error::Config(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 1..40 {
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(1.0..4.0)).collect();
            // oracle: count-based selection
            let below = |x: f64| v.iter().filter(|&&y| y < x).count();
            let got = median_design_effect(&v).unwrap();
            if len % 2 == 1 {
                let med = *v.iter().find(|&&x| below(x) == len / 2).unwrap();
                assert_eq!(got, med);
            } else {
                let lo = *v.iter().find(|&&x| below(x) == len / 2 - 1).unwrap();
                let hi = *v.iter().find(|&&x| below(x) == len / 2).unwrap();
                assert_eq!(got, 0.5 * (lo + hi));
            }
        }
    }

    fn one_country_ctx(n_studies: usize) -> ModelContext {
        let regions: BTreeMap<String, String> = [("A".to_string(), "R".to_string())].into_iter().collect();
        let cov: BTreeMap<(String, i32), Vec<f64>> =
            (2000..2005).map(|y| (("A".to_string(), y), vec![y as f64])).collect();
        let hier = HierarchyConfig::new(&regions, 2000, 2004, vec!["x".into()], &cov).unwrap();
        ModelContext {
            hier,
            designs: vec![
                StudyDesign {
                    country: 0,
                    year: 0,
                    national: true,
                    full_age: true,
                    stratum: Stratum::All
                };
                n_studies
            ],
            options: ModelOptions {
                components: 3,
                strata: false,
                main_effects: false,
            },
            bounds: PriorBounds::default(),
        }
    }

    fn state_for(ctx: &ModelContext) -> ModelState {
        let mut s = ModelState::zeros(&ctx.dims().unwrap());
        s.thetas = vec![-2.5, -1.0, 0.5];
        s.sigmas = vec![0.8, 1.0, 0.9];
        for (m, c) in s.effects.components.iter_mut().enumerate() {
            c.delta_c[0] = 0.3 * m as f64 - 0.2;
            for (i, a) in c.a.iter_mut().enumerate() {
                *a = 0.1 * i as f64 - 0.05 * m as f64;
            }
        }
        s
    }

    #[test]
    fn total_loglik_additivity() {
        let studies = vec![
            micro("s1", vec![(-1.0, 1.0), (-2.2, 2.0)], 1.5),
            agg(
                "s2",
                Summaries {
                    mean: Some(-1.1),
                    prev2: Some(0.3),
                    prev3: None,
                },
                400.0,
            ),
            micro("s3", vec![(0.3, 1.0)], 1.0),
            agg(
                "s4",
                Summaries {
                    prev3: Some(0.05),
                    ..Default::default()
                },
                200.0,
            ),
        ];
        let ctx = one_country_ctx(4);
        let state = state_for(&ctx);
        let total = total_loglik(&studies, &state, &ctx).unwrap();

        let single_ctx = one_country_ctx(1);
        let single_state = state_for(&single_ctx);
        let w = study_weights_for(&single_state, &single_ctx);
        let b = single_state.basis(3.0).unwrap();
        assert_eq!(
            total_loglik(&studies[..1], &single_state, &single_ctx).unwrap(),
            micro_loglik(&studies[0], &b, &w).unwrap()
        );

        // permute studies together with their study effects
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<StudyRecord> = perm.iter().map(|&i| studies[i].clone()).collect();
        let mut pstate = state.clone();
        for c in &mut pstate.effects.components {
            c.a = perm.iter().map(|&i| c.a[i]).collect();
        }
        assert!((total_loglik(&permuted, &pstate, &ctx).unwrap() - total).abs() < 1e-9);

        let per = PreparedStudies::new(&studies).unwrap().per_study(&state, &ctx).unwrap();
        let halves = per[..2].iter().sum::<f64>() + per[2..].iter().sum::<f64>();
        assert!((halves - total).abs() < 1e-9);
    }

    fn study_weights_for(state: &ModelState, ctx: &ModelContext) -> WeightVector<f64> {
        crate::model::study_weights(state, ctx, 0).unwrap()
    }

    #[test]
    fn record_issues() {
        let bad = agg(
            "b",
            Summaries {
                mean: None,
                prev2: Some(0.1),
                prev3: Some(0.2),
            },
            0.0,
        );
        assert!(bad.issues().iter().any(|m| m.contains("prev3")));
        let empty = agg("e", Summaries::default(), 0.0);
        assert!(!empty.issues().is_empty());
        let huge = agg(
            "h",
            Summaries {
                mean: Some(0.0),
                ..Default::default()
            },
            20_000.0,
        );
        assert!(huge.issues().iter().any(|m| m.contains("ten times")));
        assert!(micro("w", vec![(0.0, -1.0)], 0.0)
            .issues()
            .iter()
            .any(|m| m.contains("nonpositive")));
        assert!(micro("ok", vec![(0.0, 1.0)], 1.0).issues().is_empty());
    }
}
