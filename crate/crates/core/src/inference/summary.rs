use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Statistic;
use crate::model::{predict_weights, ModelState, Stratum};
use crate::sampler::{gelman_rubin, mc_diagnostics, mixture_functionals, PosteriorDraws};

/// Number of points of the exported density grid.
pub const GRID_POINTS: usize = 401;
pub const GRID_MIN: f64 = -6.0;
pub const GRID_MAX: f64 = 6.0;

/// A country-year-stratum prediction target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub country: String,
    pub year: i32,
    #[serde(default = "default_stratum")]
    pub stratum: Stratum,
}

fn default_stratum() -> Stratum {
    Stratum::All
}

impl Target {
    pub fn new(country: impl Into<String>, year: i32, stratum: Stratum) -> Self {
        Self {
            country: country.into(),
            year,
            stratum,
        }
    }
}

/// One line of an output table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub target: String,
    pub year: i32,
    pub stratum: Stratum,
    pub stat: Statistic,
    pub posterior_mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    /// NaN with fewer than two chains.
    pub rhat: f64,
    /// NaN for traces shorter than 10 draws or constant traces.
    pub ess: f64,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior mean, equal-tailed 95% interval, R̂ and ESS of per-chain traces.
pub fn summarize_traces(traces: &[Vec<f64>]) -> (f64, f64, f64, f64, f64) {
    let mut all: Vec<f64> = traces.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(f64::total_cmp);
    let refs: Vec<&[f64]> = traces.iter().map(Vec::as_slice).collect();
    let rhat = gelman_rubin(&refs).unwrap_or(f64::NAN);
    let ess = traces
        .iter()
        .map(|t| match mc_diagnostics(t) {
            Ok(d) if !d.degenerate => d.ess,
            _ => f64::NAN,
        })
        .sum();
    (mean, quantile(&all, 0.025), quantile(&all, 0.975), rhat, ess)
}

pub(crate) fn rows_from_traces(target: &str, year: i32, stratum: Stratum, traces: &[Vec<[f64; 3]>]) -> Vec<SummaryRow> {
    Statistic::ALL
        .iter()
        .map(|&stat| {
            let per_chain: Vec<Vec<f64>> = traces
                .iter()
                .map(|c| c.iter().map(|f| f[stat.index()]).collect())
                .collect();
            let (posterior_mean, lo95, hi95, rhat, ess) = summarize_traces(&per_chain);
            SummaryRow {
                target: target.to_string(),
                year,
                stratum,
                stat,
                posterior_mean,
                lo95,
                hi95,
                rhat,
                ess,
            }
        })
        .collect()
}

/// Applies `f` to every retained state, keeping the chain structure.
pub(crate) fn map_draws<T>(draws: &PosteriorDraws, mut f: impl FnMut(&ModelState) -> Result<T>) -> Result<Vec<Vec<T>>> {
    if draws.n_draws() == 0 {
        return Err(Error::InvalidArgument("posterior has no draws".into()));
    }
    draws
        .chains
        .iter()
        .enumerate()
        .map(|(c, trace)| (0..trace.params.len()).map(|d| f(&draws.state(c, d)?)).collect())
        .collect()
}

fn resolve(draws: &PosteriorDraws, target: &Target) -> Result<(usize, usize)> {
    let hier = &draws.context.hier;
    Ok((hier.country_index(&target.country)?, hier.year_index(target.year)?))
}

/// Posterior summaries of the mean and both prevalences for each target, with study
/// effects set to zero.
pub fn summarize_posterior(draws: &PosteriorDraws, targets: &[Target]) -> Result<Vec<SummaryRow>> {
    let ctx = &draws.context;
    let mut rows = Vec::with_capacity(targets.len() * 3);
    for target in targets {
        let (j, t) = resolve(draws, target)?;
        let traces = map_draws(draws, |s| {
            let w = predict_weights(s, ctx, j, t, target.stratum)?;
            Ok(mixture_functionals(&s.thetas, &s.sigmas, w.as_slice()))
        })?;
        rows.extend(rows_from_traces(&target.country, target.year, target.stratum, &traces));
    }
    Ok(rows)
}

/// Every country-year of the fit, combined stratum.
pub fn all_targets(draws: &PosteriorDraws) -> Vec<Target> {
    let hier = &draws.context.hier;
    hier.countries()
        .iter()
        .flat_map(|c| (hier.first_year()..=hier.last_year()).map(move |y| Target::new(c.clone(), y, Stratum::All)))
        .collect()
}

/// Grid abscissae: `GRID_POINTS` equally spaced values on `[GRID_MIN, GRID_MAX]`.
pub fn density_grid() -> Vec<f64> {
    let h = (GRID_MAX - GRID_MIN) / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS).map(|i| GRID_MIN + h * i as f64).collect()
}

/// Mixture density on the grid.
pub fn mixture_density_on_grid(thetas: &[f64], sigmas: &[f64], w: &[f64], grid: &[f64]) -> Vec<f64> {
    let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    grid.iter()
        .map(|&z| {
            thetas
                .iter()
                .zip(sigmas)
                .zip(w)
                .map(|((t, s), wk)| {
                    let u = (z - t) / s;
                    wk * c / s * (-0.5 * u * u).exp()
                })
                .sum()
        })
        .collect()
}

/// Mean and prevalences recomputed from a density tabulated on `grid` by trapezoidal
/// quadrature with linear interpolation at the cutoffs.
pub fn functionals_from_grid(grid: &[f64], density: &[f64]) -> [f64; 3] {
    let mut mean = 0.0;
    let mut below = [0.0; 2];
    let cut = [-2.0, -3.0];
    for i in 1..grid.len() {
        let (x0, x1) = (grid[i - 1], grid[i]);
        let (f0, f1) = (density[i - 1], density[i]);
        mean += 0.5 * (x1 - x0) * (x0 * f0 + x1 * f1);
        for (k, &c) in cut.iter().enumerate() {
            if x1 <= c {
                below[k] += 0.5 * (x1 - x0) * (f0 + f1);
            } else if x0 < c {
                let fc = f0 + (f1 - f0) * (c - x0) / (x1 - x0);
                below[k] += 0.5 * (c - x0) * (f0 + fc);
            }
        }
    }
    [mean, below[0], below[1]]
}

/// Posterior mean density and pointwise 95% band of one target on the export grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub target: Target,
    pub z: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

pub fn posterior_density_grid(draws: &PosteriorDraws, target: &Target) -> Result<DensityGrid> {
    let ctx = &draws.context;
    let (j, t) = resolve(draws, target)?;
    let z = density_grid();
    let per_draw: Vec<Vec<f64>> = map_draws(draws, |s| {
        let w = predict_weights(s, ctx, j, t, target.stratum)?;
        Ok(mixture_density_on_grid(&s.thetas, &s.sigmas, w.as_slice(), &z))
    })?
    .into_iter()
    .flatten()
    .collect();
    let n = per_draw.len() as f64;
    let mut mean = vec![0.0; z.len()];
    let mut lo95 = Vec::with_capacity(z.len());
    let mut hi95 = Vec::with_capacity(z.len());
    let mut column = Vec::with_capacity(per_draw.len());
    for i in 0..z.len() {
        column.clear();
        column.extend(per_draw.iter().map(|d| d[i]));
        mean[i] = column.iter().sum::<f64>() / n;
        column.sort_by(f64::total_cmp);
        lo95.push(quantile(&column, 0.025));
        hi95.push(quantile(&column, 0.975));
    }
    Ok(DensityGrid {
        target: target.clone(),
        z,
        mean,
        lo95,
        hi95,
    })
}

pub const TABLE_HEADER: [&str; 9] = [
    "target",
    "year",
    "stratum",
    "stat",
    "posterior_mean",
    "lo95",
    "hi95",
    "rhat",
    "ess",
];

/// Writes summary rows as comma-separated text with the fixed header.
pub fn write_summary_table<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER)?;
    for r in rows {
        w.write_record([
            r.target.clone(),
            r.year.to_string(),
            r.stratum.to_string(),
            r.stat.as_str().to_string(),
            r.posterior_mean.to_string(),
            r.lo95.to_string(),
            r.hi95.to_string(),
            r.rhat.to_string(),
            r.ess.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes density grids in long format: target, year, stratum, z, mean, lo95, hi95.
pub fn write_density_grids<W: Write>(grids: &[DensityGrid], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target", "year", "stratum", "z", "density_mean", "lo95", "hi95"])?;
    for g in grids {
        for i in 0..g.z.len() {
            w.write_record([
                g.target.country.clone(),
                g.target.year.to_string(),
                g.target.stratum.to_string(),
                g.z[i].to_string(),
                g.mean[i].to_string(),
                g.lo95[i].to_string(),
                g.hi95[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
