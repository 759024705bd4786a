use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DatasetBundle;
use crate::likelihood::{full_moments, median, Statistic, StudyData, StudyRecord, Summaries};
use crate::mixture::stick_break_into;
use crate::model::{
    compute_alpha_into, study_weights, AlphaTarget, ModelContext, ModelOptions, ModelState, PriorBounds, Stratum,
};
use crate::sampler::{draw_t, run_chains, PosteriorDraws, SamplerConfig};

use super::simulate::micro_summaries;
use super::summary::quantile;

/// Which quantities are held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvTest {
    /// All data of a subset of countries.
    Countries,
    /// Mean and prev₋₃ of a subset of studies, keeping their prev₋₂.
    Metrics,
    /// The studies of `Metrics` removed entirely (comparison baseline).
    MetricsRemoved,
}

impl CvTest {
    pub fn from_number(test: u8, removed: bool) -> Result<Self> {
        match (test, removed) {
            (1, false) => Ok(CvTest::Countries),
            (2, false) => Ok(CvTest::Metrics),
            (2, true) => Ok(CvTest::MetricsRemoved),
            (1, true) => Err(Error::Config(
                "the removed-study baseline applies to test 2 only".into(),
            )),
            _ => Err(Error::Config(format!("unknown cross-validation test {test}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    /// Share of all countries held out per fold in the country test.
    pub country_fraction: f64,
    /// Countries held out per fold from the data-rich, average, and data-poor strata;
    /// proportional to stratum sizes when absent.
    pub quotas: Option<[usize; 3]>,
    /// Sampler settings of the refits; the run's sampler settings when absent.
    pub sampler: Option<SamplerConfig>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            country_fraction: 0.1,
            quotas: None,
            sampler: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityStratum {
    Rich,
    Average,
    Poor,
}

const DENSITY_STRATA: [DensityStratum; 3] = [DensityStratum::Rich, DensityStratum::Average, DensityStratum::Poor];

/// Countries with data split into tertiles by study count; ties are broken at random.
pub fn density_strata(bundle: &DatasetBundle, seed: u64) -> BTreeMap<String, DensityStratum> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &bundle.studies {
        *counts.entry(s.country.as_str()).or_default() += 1;
    }
    let mut order: Vec<(&str, usize)> = counts.into_iter().collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    order.sort_by_key(|&(_, n)| n);
    let n = order.len();
    let third = n / 3;
    order
        .iter()
        .enumerate()
        .map(|(i, (c, _))| {
            let s = if i < third {
                DensityStratum::Poor
            } else if i >= n - third {
                DensityStratum::Rich
            } else {
                DensityStratum::Average
            };
            (c.to_string(), s)
        })
        .collect()
}

/// Largest-remainder split of `total` in proportion to `sizes`.
fn proportional_quotas(total: usize, sizes: [usize; 3]) -> [usize; 3] {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return [0; 3];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| total as f64 * s as f64 / n as f64).collect();
    let mut q: [usize; 3] = [0, 1, 2].map(|k| exact[k].floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = total.saturating_sub(q.iter().sum());
    for k in order {
        if left == 0 {
            break;
        }
        q[k] += 1;
        left -= 1;
    }
    q
}

/// Held-out countries of each fold for the country test; folds do not overlap.
pub fn country_folds(bundle: &DatasetBundle, cv: &CvConfig, seed: u64) -> Result<Vec<Vec<String>>> {
    let strata = density_strata(bundle, seed);
    let mut members: BTreeMap<DensityStratum, Vec<String>> = BTreeMap::new();
    for (c, s) in &strata {
        members.entry(*s).or_default().push(c.clone());
    }
    let sizes = DENSITY_STRATA.map(|s| members.get(&s).map_or(0, Vec::len));
    let per_fold = ((cv.country_fraction * bundle.hierarchy.n_countries() as f64).round() as usize).max(1);
    let quotas = cv.quotas.unwrap_or_else(|| proportional_quotas(per_fold, sizes));
    for (k, s) in DENSITY_STRATA.iter().enumerate() {
        if quotas[k] * cv.folds > sizes[k] {
            return Err(Error::Config(format!(
                "{s:?} stratum has {} countries; {} folds of {} need {}",
                sizes[k],
                cv.folds,
                quotas[k],
                quotas[k] * cv.folds
            )));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let mut folds = vec![Vec::new(); cv.folds];
    for (k, s) in DENSITY_STRATA.iter().enumerate() {
        let mut pool = members.remove(s).unwrap_or_default();
        pool.shuffle(&mut rng);
        for (f, fold) in folds.iter_mut().enumerate() {
            fold.extend(pool[f * quotas[k]..(f + 1) * quotas[k]].iter().cloned());
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}

fn observed(study: &StudyRecord) -> Summaries {
    match &study.data {
        StudyData::Micro(obs) => {
            let [mean, prev2, prev3] = micro_summaries(obs);
            Summaries {
                mean: Some(mean),
                prev2: Some(prev2),
                prev3: Some(prev3),
            }
        }
        StudyData::Aggregate { summaries, .. } => *summaries,
    }
}

/// Studies eligible for the metric test: prev₋₂ plus at least one other statistic.
fn metric_eligible(study: &StudyRecord) -> bool {
    let s = observed(study);
    s.prev2.is_some() && (s.mean.is_some() || s.prev3.is_some())
}

/// Held-out study ids of each fold for the metric tests.
pub fn study_folds(bundle: &DatasetBundle, folds: usize, seed: u64) -> Vec<Vec<String>> {
    let mut ids: Vec<String> = bundle
        .studies
        .iter()
        .filter(|s| metric_eligible(s))
        .map(|s| s.study_id.clone())
        .collect();
    ids.shuffle(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x5eed));
    let mut out = vec![Vec::new(); folds];
    for (i, id) in ids.into_iter().enumerate() {
        out[i % folds].push(id);
    }
    for f in &mut out {
        f.sort();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPrediction {
    pub fold: usize,
    pub study_id: String,
    pub country: String,
    pub year: i32,
    pub stat: Statistic,
    pub observed: f64,
    pub predicted: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl CvPrediction {
    pub fn abs_error(&self) -> f64 {
        (self.predicted - self.observed).abs()
    }

    pub fn covered(&self) -> bool {
        self.lo95 <= self.observed && self.observed <= self.hi95
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvMetricSummary {
    pub stat: Statistic,
    pub n: usize,
    pub median_abs_error: f64,
    /// Over observations with a nonzero value.
    pub median_rel_error: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub test: CvTest,
    pub folds: usize,
    pub predictions: Vec<CvPrediction>,
    pub summary: Vec<CvMetricSummary>,
}

impl CvReport {
    pub fn new(test: CvTest, folds: usize, predictions: Vec<CvPrediction>) -> Self {
        let summary = Statistic::ALL
            .iter()
            .filter_map(|&stat| {
                let rows: Vec<&CvPrediction> = predictions.iter().filter(|p| p.stat == stat).collect();
                if rows.is_empty() {
                    return None;
                }
                let mut abs: Vec<f64> = rows.iter().map(|p| p.abs_error()).collect();
                let mut rel: Vec<f64> = rows
                    .iter()
                    .filter(|p| p.observed != 0.0)
                    .map(|p| p.abs_error() / p.observed.abs())
                    .collect();
                Some(CvMetricSummary {
                    stat,
                    n: rows.len(),
                    median_abs_error: median(&mut abs).unwrap_or(f64::NAN),
                    median_rel_error: median(&mut rel).unwrap_or(f64::NAN),
                    coverage: rows.iter().filter(|p| p.covered()).count() as f64 / rows.len() as f64,
                })
            })
            .collect();
        Self {
            test,
            folds,
            predictions,
            summary,
        }
    }

    /// Share of held-out values inside their 95% intervals, over all statistics.
    pub fn overall_coverage(&self) -> f64 {
        if self.predictions.is_empty() {
            return f64::NAN;
        }
        self.predictions.iter().filter(|p| p.covered()).count() as f64 / self.predictions.len() as f64
    }

    pub fn metric(&self, stat: Statistic) -> Option<&CvMetricSummary> {
        self.summary.iter().find(|s| s.stat == stat)
    }

    /// Table with one row per statistic: median absolute error, median relative error,
    /// coverage.
    pub fn write_summary<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stat", "n", "median_abs_error", "median_rel_error", "coverage"])?;
        for s in &self.summary {
            w.write_record([
                s.stat.as_str().to_string(),
                s.n.to_string(),
                s.median_abs_error.to_string(),
                s.median_rel_error.to_string(),
                s.coverage.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_predictions<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "fold",
            "study_id",
            "country",
            "year",
            "stat",
            "observed",
            "predicted",
            "lo95",
            "hi95",
        ])?;
        for p in &self.predictions {
            w.write_record([
                p.fold.to_string(),
                p.study_id.clone(),
                p.country.clone(),
                p.year.to_string(),
                p.stat.as_str().to_string(),
                p.observed.to_string(),
                p.predicted.to_string(),
                p.lo95.to_string(),
                p.hi95.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lower Cholesky factor with one jittered retry.
fn cholesky(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let jitter = 1e-10 * m.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    (m + DMatrix::identity(d, d) * jitter)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::numeric("predictive draw", "covariance is not positive definite"))
}

fn mvn_draw<R: Rng + ?Sized>(mu: &DVector<f64>, cov: DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let l = cholesky(cov)?;
    let z = DVector::from_fn(mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mu + l * z)
}

/// Weights of a study not in the fit, with its random effects given per score.
fn new_study_weights(
    state: &ModelState,
    ctx: &ModelContext,
    design: (usize, usize, Stratum, bool),
    a: &[f64],
    b: &[f64],
    c: &[f64],
) -> Result<Vec<f64>> {
    let (j, t, stratum, full_age) = design;
    let m = state.effects.components.len();
    let mut alpha = vec![0.0; m];
    let mut w = Vec::new();
    let mut scores = |indicator: f64, stratum_err: bool, w: &mut Vec<f64>| {
        compute_alpha_into(
            &state.effects,
            &ctx.hier,
            &AlphaTarget::population(j, t, indicator),
            &mut alpha,
        );
        for k in 0..m {
            alpha[k] += a[k] + if full_age { 0.0 } else { b[k] };
            if stratum_err {
                alpha[k] += indicator * c[k];
            }
        }
        stick_break_into(&alpha, w);
    };
    if !ctx.options.strata {
        if stratum != Stratum::All {
            return Err(Error::Config(format!(
                "stratum '{stratum}' requested but strata are not modeled"
            )));
        }
        scores(0.0, false, &mut w);
        return Ok(w);
    }
    match stratum {
        Stratum::Urban | Stratum::Rural => scores(stratum.indicator(), true, &mut w),
        Stratum::All => {
            let share = ctx.hier.urban_share(j, t).ok_or_else(|| {
                Error::Config("strata are modeled but no urban population shares were supplied".into())
            })?;
            let mut rural = Vec::new();
            scores(1.0, false, &mut w);
            scores(-1.0, false, &mut rural);
            for (u, r) in w.iter_mut().zip(&rural) {
                *u = share * *u + (1.0 - share) * r;
            }
        }
    }
    Ok(w)
}

/// Interval summary of predictive draws.
fn summarize_predictive(mut values: Vec<f64>) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    (mean, quantile(&values, 0.025), quantile(&values, 0.975))
}

/// Posterior predictive of the reported statistics of a study absent from the fit: study
/// effects drawn from their priors, sampling error from the normal approximation at the
/// study's ESS.
pub fn predict_new_study(
    draws: &PosteriorDraws,
    study: &StudyRecord,
    stats: &[Statistic],
    seed: u64,
) -> Result<Vec<(Statistic, f64, f64, f64)>> {
    let ctx = &draws.context;
    let j = ctx.hier.country_index(&study.country)?;
    let t = ctx.hier.year_index(study.year)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); stats.len()];
    for state in draws.states() {
        let state = state?;
        let m = state.effects.components.len();
        let (mut a, mut b, mut c) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for (k, h) in state.hyper.components.iter().enumerate() {
            let v = if study.national { h.v_n } else { h.v_s };
            a[k] = v * draw_t(4.0, &mut rng);
            b[k] = h.v_b * draw_t(4.0, &mut rng);
            if let Some(sh) = &h.strata {
                c[k] = sh.v_c * draw_t(4.0, &mut rng);
            }
        }
        let w = new_study_weights(&state, ctx, (j, t, study.stratum, study.full_age), &a, &b, &c)?;
        let full = full_moments(&state.thetas, &state.sigmas, &w, study.ess);
        let idx: Vec<usize> = stats.iter().map(|s| s.index()).collect();
        let mu = DVector::from_iterator(idx.len(), idx.iter().map(|&i| full.mu[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| full.sigma[idx[r]][idx[c]]);
        let y = mvn_draw(&mu, cov, &mut rng)?;
        for (o, v) in out.iter_mut().zip(y.iter()) {
            o.push(*v);
        }
    }
    Ok(stats
        .iter()
        .zip(out)
        .map(|(&s, v)| {
            let (mean, lo, hi) = summarize_predictive(v);
            (s, mean, lo, hi)
        })
        .collect())
}

/// Posterior predictive of held-out statistics of study `index` of the fit, given the
/// retained statistics it still reports: the study's own effects, and the conditional
/// normal sampling distribution of the held-out statistics given the retained ones.
pub fn predict_retained_study(
    draws: &PosteriorDraws,
    index: usize,
    ess: f64,
    retained: &[(Statistic, f64)],
    held: &[Statistic],
    seed: u64,
) -> Result<Vec<(Statistic, f64, f64, f64)>> {
    let ctx = &draws.context;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let r: Vec<usize> = retained.iter().map(|(s, _)| s.index()).collect();
    let h: Vec<usize> = held.iter().map(|s| s.index()).collect();
    let y_r = DVector::from_iterator(r.len(), retained.iter().map(|(_, v)| *v));
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); held.len()];
    for state in draws.states() {
        let state = state?;
        let w = study_weights(&state, ctx, index)?;
        let full = full_moments(&state.thetas, &state.sigmas, w.as_slice(), ess);
        let sub = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |a, b| full.sigma[rows[a]][cols[b]])
        };
        let mu_h = DVector::from_iterator(h.len(), h.iter().map(|&i| full.mu[i]));
        let mu_r = DVector::from_iterator(r.len(), r.iter().map(|&i| full.mu[i]));
        let (s_hh, s_hr, s_rr) = (sub(&h, &h), sub(&h, &r), sub(&r, &r));
        let (mean, cov) = if r.is_empty() {
            (mu_h, s_hh)
        } else {
            let l = cholesky(s_rr)?;
            let chol = nalgebra::Cholesky::new_unchecked(l);
            let gain = chol.solve(&s_hr.transpose()).transpose();
            let mean = &mu_h + &gain * (&y_r - &mu_r);
            let cov = &s_hh - &gain * s_hr.transpose();
            let cov = (&cov + cov.transpose()) * 0.5;
            (mean, cov)
        };
        let y = mvn_draw(&mean, cov, &mut rng)?;
        for (o, v) in out.iter_mut().zip(y.iter()) {
            o.push(*v);
        }
    }
    Ok(held
        .iter()
        .zip(out)
        .map(|(&s, v)| {
            let (mean, lo, hi) = summarize_predictive(v);
            (s, mean, lo, hi)
        })
        .collect())
}

/// Restores the ESS of every study from the full dataset, so refits see the same
/// information per study as the full fit.
fn refit_bundle(full: &DatasetBundle, studies: Vec<StudyRecord>) -> Result<DatasetBundle> {
    let ess: BTreeMap<&str, f64> = full.studies.iter().map(|s| (s.study_id.as_str(), s.ess)).collect();
    let mut b = full.with_studies(studies)?;
    for s in &mut b.studies {
        if let Some(&e) = ess.get(s.study_id.as_str()) {
            s.ess = e;
        }
    }
    Ok(b)
}

fn fit(
    bundle: &DatasetBundle,
    options: ModelOptions,
    bounds: PriorBounds,
    sampler: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let ctx = bundle.context(options, Some(bounds))?;
    run_chains(&ctx, &bundle.prepared()?, sampler, None)
}

/// The prev₋₂-only version of a study.
fn keep_prev2(study: &StudyRecord) -> StudyRecord {
    let obs = observed(study);
    StudyRecord {
        data: StudyData::Aggregate {
            summaries: Summaries {
                prev2: obs.prev2,
                ..Summaries::default()
            },
            nominal_n: study.nominal_n(),
        },
        ..study.clone()
    }
}

fn prediction_rows(
    fold: usize,
    study: &StudyRecord,
    observed: &Summaries,
    preds: Vec<(Statistic, f64, f64, f64)>,
) -> Vec<CvPrediction> {
    preds
        .into_iter()
        .map(|(stat, predicted, lo95, hi95)| CvPrediction {
            fold,
            study_id: study.study_id.clone(),
            country: study.country.clone(),
            year: study.year,
            stat,
            observed: observed.get(stat).expect("held-out statistic is observed"),
            predicted,
            lo95,
            hi95,
        })
        .collect()
}

/// K-fold cross-validation: per fold, refit without the held-out quantities and predict
/// them. Folds with nothing held out are skipped.
pub fn crossvalidate(
    bundle: &DatasetBundle,
    options: ModelOptions,
    bounds: Option<PriorBounds>,
    sampler: &SamplerConfig,
    cv: &CvConfig,
    test: CvTest,
    seed: u64,
) -> Result<CvReport> {
    if cv.folds == 0 {
        return Err(Error::Config("at least one fold is required".into()));
    }
    let bounds = match bounds {
        Some(b) => b,
        None => bundle.context(options, None)?.bounds,
    };
    let sampler = cv.sampler.as_ref().unwrap_or(sampler);
    let mut predictions = Vec::new();
    match test {
        CvTest::Countries => {
            let folds = country_folds(bundle, cv, seed)?;
            for (f, held) in folds.iter().enumerate() {
                let held: BTreeSet<&str> = held.iter().map(String::as_str).collect();
                let (out, kept): (Vec<_>, Vec<_>) = bundle
                    .studies
                    .iter()
                    .cloned()
                    .partition(|s| held.contains(s.country.as_str()));
                if out.is_empty() {
                    continue;
                }
                let draws = fit(&refit_bundle(bundle, kept)?, options, bounds, &fold_sampler(sampler, f))?;
                for (i, s) in out.iter().enumerate() {
                    let obs = observed(s);
                    let stats: Vec<Statistic> = obs.reported().into_iter().map(|(s, _)| s).collect();
                    let preds = predict_new_study(&draws, s, &stats, prediction_seed(seed, f, i))?;
                    predictions.extend(prediction_rows(f, s, &obs, preds));
                }
            }
        }
        CvTest::Metrics | CvTest::MetricsRemoved => {
            let folds = study_folds(bundle, cv.folds, seed);
            for (f, held) in folds.iter().enumerate() {
                if held.is_empty() {
                    continue;
                }
                let held: BTreeSet<&str> = held.iter().map(String::as_str).collect();
                let is_held = |s: &StudyRecord| held.contains(s.study_id.as_str());
                let studies: Vec<StudyRecord> = if test == CvTest::Metrics {
                    bundle
                        .studies
                        .iter()
                        .map(|s| if is_held(s) { keep_prev2(s) } else { s.clone() })
                        .collect()
                } else {
                    bundle.studies.iter().filter(|s| !is_held(s)).cloned().collect()
                };
                let refit = refit_bundle(bundle, studies)?;
                let draws = fit(&refit, options, bounds, &fold_sampler(sampler, f))?;
                for (i, s) in bundle.studies.iter().filter(|s| is_held(s)).enumerate() {
                    let obs = observed(s);
                    let stats: Vec<Statistic> = [Statistic::Mean, Statistic::Prev3]
                        .into_iter()
                        .filter(|&st| obs.get(st).is_some())
                        .collect();
                    let pseed = prediction_seed(seed, f, i);
                    let preds = if test == CvTest::Metrics {
                        let index = refit
                            .studies
                            .iter()
                            .position(|r| r.study_id == s.study_id)
                            .expect("held-out study stays in the refit");
                        let prev2 = obs.prev2.expect("eligible studies report prev2");
                        predict_retained_study(&draws, index, s.ess, &[(Statistic::Prev2, prev2)], &stats, pseed)?
                    } else {
                        predict_new_study(&draws, s, &stats, pseed)?
                    };
                    predictions.extend(prediction_rows(f, s, &obs, preds));
                }
            }
        }
    }
    Ok(CvReport::new(test, cv.folds, predictions))
}

fn fold_sampler(base: &SamplerConfig, fold: usize) -> SamplerConfig {
    SamplerConfig {
        seed: base.seed.wrapping_add(1_000 * (fold as u64 + 1)),
        ..base.clone()
    }
}

fn prediction_seed(seed: u64, fold: usize, study: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((fold as u64) << 32 | study as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{simulate_synthetic, SyntheticSpec};

    fn bundle() -> DatasetBundle {
        let spec = SyntheticSpec {
            n_countries: 10,
            n_regions: 2,
            n_years: 4,
            studies_per_country: 2,
            micro_n: [60, 80],
            agg_n: [200, 400],
            ..SyntheticSpec::default()
        };
        simulate_synthetic(&spec, 4).unwrap().0
    }

    #[test]
    fn quotas_split_in_proportion() {
        assert_eq!(proportional_quotas(2, [7, 6, 7]), [1, 0, 1]);
        assert_eq!(proportional_quotas(3, [3, 3, 3]), [1, 1, 1]);
        assert_eq!(proportional_quotas(0, [3, 3, 3]), [0, 0, 0]);
    }

    #[test]
    fn folds_are_deterministic_and_disjoint() {
        let b = bundle();
        let cv = CvConfig {
            folds: 3,
            country_fraction: 0.3,
            ..CvConfig::default()
        };
        let f1 = country_folds(&b, &cv, 7).unwrap();
        assert_eq!(f1, country_folds(&b, &cv, 7).unwrap());
        let all: Vec<&String> = f1.iter().flatten().collect();
        let unique: BTreeSet<&String> = all.iter().copied().collect();
        assert_eq!(all.len(), unique.len());
        assert!(f1.iter().all(|f| f.len() == 3));
        assert_eq!(study_folds(&b, 5, 1), study_folds(&b, 5, 1));
    }

    #[test]
    fn too_many_folds_for_a_stratum() {
        let cv = CvConfig {
            folds: 5,
            quotas: Some([2, 0, 0]),
            ..CvConfig::default()
        };
        assert!(matches!(country_folds(&bundle(), &cv, 1), Err(Error::Config(_))));
    }

    #[test]
    fn empty_held_out_set_gives_empty_report() {
        let b = bundle();
        let cv = CvConfig {
            folds: 2,
            quotas: Some([0, 0, 0]),
            ..CvConfig::default()
        };
        let r = crossvalidate(
            &b,
            ModelOptions::default(),
            None,
            &SamplerConfig::with_iterations(20, 10, 1),
            &cv,
            CvTest::Countries,
            1,
        )
        .unwrap();
        assert!(r.predictions.is_empty() && r.summary.is_empty());
    }

    #[test]
    fn report_metrics() {
        let row = |stat, observed: f64, predicted: f64| CvPrediction {
            fold: 0,
            study_id: "s".into(),
            country: "C".into(),
            year: 2000,
            stat,
            observed,
            predicted,
            lo95: predicted - 0.1,
            hi95: predicted + 0.1,
        };
        let r = CvReport::new(
            CvTest::Countries,
            1,
            vec![
                row(Statistic::Mean, -1.0, -1.05),
                row(Statistic::Mean, -1.0, -1.5),
                row(Statistic::Mean, -2.0, -2.0),
            ],
        );
        let m = r.metric(Statistic::Mean).unwrap();
        assert_eq!(m.n, 3);
        assert!((m.median_abs_error - 0.05).abs() < 1e-12);
        assert!((m.median_rel_error - 0.05).abs() < 1e-12);
        assert!((m.coverage - 2.0 / 3.0).abs() < 1e-12);
    }
}
