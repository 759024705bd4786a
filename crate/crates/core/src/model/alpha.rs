//! Assembly of stick-breaking scores and weights for studies and prediction targets.

use crate::error::{Error, Result};
use crate::mixture::{stick_break_into, WeightVector};

use super::hierarchy::HierarchyConfig;
use super::state::{AlphaEffects, ModelOptions, ModelState, Stratum, StudyDesign};
use super::ModelContext;

/// What a score vector is computed for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaTarget {
    pub country: usize,
    pub year: usize,
    /// Centered stratum indicator: +1 urban, −1 rural, 0 when strata are not modeled.
    pub indicator: f64,
    /// Study whose random effects apply; `None` for population predictions.
    pub study: Option<(usize, StudyDesign)>,
}

impl AlphaTarget {
    pub fn population(country: usize, year: usize, indicator: f64) -> Self {
        Self {
            country,
            year,
            indicator,
            study: None,
        }
    }
}

/// Stick-breaking scores (length M) for `target`.
pub fn compute_alpha(effects: &AlphaEffects, hier: &HierarchyConfig, target: &AlphaTarget) -> Result<Vec<f64>> {
    if target.country >= hier.n_countries() {
        return Err(Error::Lookup(format!("country index {} out of range", target.country)));
    }
    if target.year >= hier.n_years() {
        return Err(Error::Lookup(format!("year index {} out of range", target.year)));
    }
    if let Some((i, _)) = target.study {
        if effects.components.first().is_some_and(|c| i >= c.a.len()) {
            return Err(Error::Lookup(format!("study index {i} out of range")));
        }
    }
    let mut out = vec![0.0; effects.components.len()];
    compute_alpha_into(effects, hier, target, &mut out);
    Ok(out)
}

/// Unchecked variant writing into `out` (length M).
pub fn compute_alpha_into(effects: &AlphaEffects, hier: &HierarchyConfig, target: &AlphaTarget, out: &mut [f64]) {
    let j = target.country;
    let t = target.year;
    let k = hier.region_of(j);
    let time = hier.time_code(t);
    let x = hier.covariates(j, t);

    let shared = effects
        .main
        .as_ref()
        .map_or(0.0, |e| e.delta0_c[j] + e.phi0_c[j] * time + dot(&e.beta0, x));

    for (m, c) in effects.components.iter().enumerate() {
        let mut a = shared + c.delta_c[j] + c.phi_c[j] * time + c.u_c[j][t] + c.u_r[k][t] + c.u_g[t] + dot(&c.beta, x);
        let mut stratum_err = 0.0;
        if let Some((i, design)) = target.study {
            a += c.a[i];
            if !design.full_age {
                a += c.b[i];
            }
            if design.has_stratum_error() {
                if let Some(s) = &c.strata {
                    stratum_err = s.c[i];
                }
            }
        }
        if target.indicator != 0.0 {
            if let Some(s) = &c.strata {
                a += target.indicator * (s.gamma_c[j] + s.rho_c[j] * time + stratum_err);
            }
        }
        out[m] = a;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reusable buffers for weight computations in hot loops.
#[derive(Debug, Default, Clone)]
pub struct WeightScratch {
    alpha: Vec<f64>,
    urban: Vec<f64>,
    rural: Vec<f64>,
}

/// Weights for `(country, year, stratum)` with the given study effects (or none),
/// blending urban and rural weights by population share for combined targets when
/// strata are modeled.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weights_into(
    effects: &AlphaEffects,
    hier: &HierarchyConfig,
    options: &ModelOptions,
    country: usize,
    year: usize,
    stratum: Stratum,
    study: Option<(usize, StudyDesign)>,
    scratch: &mut WeightScratch,
    out: &mut Vec<f64>,
) -> Result<()> {
    let m = effects.components.len();
    scratch.alpha.resize(m, 0.0);
    let mut target = AlphaTarget {
        country,
        year,
        indicator: 0.0,
        study,
    };
    if !options.strata {
        if stratum != Stratum::All {
            return Err(Error::Config(format!(
                "stratum '{stratum}' requested but strata are not modeled"
            )));
        }
        compute_alpha_into(effects, hier, &target, &mut scratch.alpha);
        stick_break_into(&scratch.alpha, out);
        return Ok(());
    }
    match stratum {
        Stratum::Urban | Stratum::Rural => {
            target.indicator = stratum.indicator();
            compute_alpha_into(effects, hier, &target, &mut scratch.alpha);
            stick_break_into(&scratch.alpha, out);
        }
        Stratum::All => {
            let share = hier.urban_share(country, year).ok_or_else(|| {
                Error::Config("strata are modeled but no urban population shares were supplied".into())
            })?;
            target.indicator = 1.0;
            compute_alpha_into(effects, hier, &target, &mut scratch.alpha);
            stick_break_into(&scratch.alpha, &mut scratch.urban);
            target.indicator = -1.0;
            compute_alpha_into(effects, hier, &target, &mut scratch.alpha);
            stick_break_into(&scratch.alpha, &mut scratch.rural);
            out.clear();
            out.extend(
                scratch
                    .urban
                    .iter()
                    .zip(&scratch.rural)
                    .map(|(u, r)| share * u + (1.0 - share) * r),
            );
        }
    }
    Ok(())
}

/// Population-level weights (study effects zeroed) for a country-year-stratum.
pub fn predict_weights(
    state: &ModelState,
    ctx: &ModelContext,
    country: usize,
    year: usize,
    stratum: Stratum,
) -> Result<WeightVector<f64>> {
    if country >= ctx.hier.n_countries() || year >= ctx.hier.n_years() {
        return Err(Error::Lookup(format!(
            "target ({country}, {year}) outside the hierarchy"
        )));
    }
    let mut out = Vec::new();
    weights_into(
        &state.effects,
        &ctx.hier,
        &ctx.options,
        country,
        year,
        stratum,
        None,
        &mut WeightScratch::default(),
        &mut out,
    )?;
    Ok(WeightVector::from_raw(out))
}

/// Weights entering the likelihood of record `study`.
pub fn study_weights(state: &ModelState, ctx: &ModelContext, study: usize) -> Result<WeightVector<f64>> {
    let design = *ctx
        .designs
        .get(study)
        .ok_or_else(|| Error::Lookup(format!("study index {study} out of range")))?;
    let mut out = Vec::new();
    weights_into(
        &state.effects,
        &ctx.hier,
        &ctx.options,
        design.country,
        design.year,
        design.stratum,
        Some((study, design)),
        &mut WeightScratch::default(),
        &mut out,
    )?;
    Ok(WeightVector::from_raw(out))
}
