use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::PopulationKey;
use crate::model::{predict_weights, ModelContext, ModelState, Stratum};
use crate::sampler::{mixture_functionals, PosteriorDraws};

use super::summary::{map_draws, rows_from_traces, SummaryRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AggregateLevel {
    Region,
    Global,
}

/// Label used for the global aggregate in output tables.
pub const GLOBAL_LABEL: &str = "global";

fn population(pops: &BTreeMap<PopulationKey, f64>, country: &str, year: i32) -> Option<f64> {
    let get = |s| pops.get(&(country.to_string(), year, s)).copied();
    get(Stratum::All).or_else(|| Some(get(Stratum::Urban)? + get(Stratum::Rural)?))
}

/// Functionals of the population-weighted mixture of `members` at one state and year.
pub(crate) fn aggregate_functionals(
    state: &ModelState,
    ctx: &ModelContext,
    members: &[usize],
    pops: &[f64],
    year: usize,
) -> Result<[f64; 3]> {
    let total: f64 = pops.iter().sum();
    let mut blended = vec![0.0; state.thetas.len()];
    for (&j, &p) in members.iter().zip(pops) {
        let w = predict_weights(state, ctx, j, year, Stratum::All)?;
        for (b, wk) in blended.iter_mut().zip(w.as_slice()) {
            *b += p / total * wk;
        }
    }
    Ok(mixture_functionals(&state.thetas, &state.sigmas, &blended))
}

/// Population-weighted region (or global) summaries for every year of the fit. Per draw,
/// the aggregate density is the population-weighted mixture of its countries' densities,
/// which shares the basis and so is the mixture with blended weights.
pub fn aggregate_region(
    draws: &PosteriorDraws,
    level: AggregateLevel,
    populations: &BTreeMap<PopulationKey, f64>,
) -> Result<Vec<SummaryRow>> {
    let ctx = &draws.context;
    let hier = &ctx.hier;
    let years: Vec<i32> = (hier.first_year()..=hier.last_year()).collect();

    let missing: BTreeSet<&str> = hier
        .countries()
        .iter()
        .filter(|c| years.iter().any(|&y| population(populations, c, y).is_none()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Lookup(format!(
            "populations missing for countries: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }

    let groups: Vec<(String, Vec<usize>)> = match level {
        AggregateLevel::Region => hier
            .regions()
            .iter()
            .enumerate()
            .map(|(k, name)| (name.clone(), hier.countries_in_region(k).collect()))
            .collect(),
        AggregateLevel::Global => vec![(GLOBAL_LABEL.to_string(), (0..hier.n_countries()).collect())],
    };

    let mut rows = Vec::new();
    for (label, members) in &groups {
        for (t, &year) in years.iter().enumerate() {
            let pops: Vec<f64> = members
                .iter()
                .map(|&j| population(populations, &hier.countries()[j], year).expect("checked above"))
                .collect();
            let total: f64 = pops.iter().sum();
            if !(total > 0.0) {
                return Err(Error::InvalidArgument(format!("{label} has zero population in {year}")));
            }
            let traces = map_draws(draws, |s| aggregate_functionals(s, ctx, members, &pops, t))?;
            rows.extend(rows_from_traces(label, year, Stratum::All, &traces));
        }
    }
    Ok(rows)
}
