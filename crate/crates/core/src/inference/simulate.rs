//! Synthetic datasets drawn through the full observation model, with ground truth.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{urban_shares, DatasetBundle, PopulationKey};
use crate::likelihood::{MicroObs, StudyData, StudyRecord, Summaries};
use crate::mixture::inverse_stick_break;
use crate::model::{
    study_weights, HierarchyConfig, ModelContext, ModelDims, ModelOptions, ModelState, PriorBounds, Rw2Sampler,
    StrataEffects, Stratum, StudyDesign,
};
use crate::sampler::{compute_functionals, draw_t};
use crate::Weights;

/// True parameter values of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    pub thetas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Global component weights at the center of the year range.
    pub weights: Vec<f64>,
    pub tau_delta_c: f64,
    pub tau_delta_r: f64,
    pub tau_phi_c: f64,
    pub tau_phi_r: f64,
    /// Trend precisions; `inf` gives flat trends.
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub v_n: f64,
    pub v_s: f64,
    pub v_b: f64,
    pub beta_sd: f64,
    pub tau_gamma: f64,
    pub tau_rho: f64,
    pub v_c: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            thetas: vec![-3.2, -2.0, -1.2, -0.4, 0.8],
            sigmas: vec![0.6, 0.5, 0.5, 0.5, 0.7],
            weights: vec![0.08, 0.2, 0.32, 0.28, 0.12],
            tau_delta_c: 0.15,
            tau_delta_r: 0.15,
            tau_phi_c: 0.1,
            tau_phi_r: 0.1,
            lambda_c: 400.0,
            lambda_r: 1200.0,
            lambda_g: 3600.0,
            v_n: 0.05,
            v_s: 0.1,
            v_b: 0.05,
            beta_sd: 0.05,
            tau_gamma: 0.1,
            tau_rho: 0.05,
            v_c: 0.05,
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_countries: usize,
    pub n_regions: usize,
    pub first_year: i32,
    pub n_years: usize,
    pub n_covariates: usize,
    pub studies_per_country: usize,
    /// The last this-many countries get no studies.
    pub data_free_countries: usize,
    /// Share of studies delivered as microdata.
    pub micro_fraction: f64,
    /// Inclusive range of microdata sample sizes.
    pub micro_n: [usize; 2],
    /// Inclusive range of aggregate sample sizes.
    pub agg_n: [u64; 2],
    pub cluster_size: usize,
    /// Probability that a cluster member copies the cluster's first value; sets the
    /// design effect.
    pub cluster_copy: f64,
    /// Log-scale SD of cluster-level survey weights.
    pub weight_sd: f64,
    pub national_fraction: f64,
    pub full_age_fraction: f64,
    /// Share of aggregate studies reporting only the −2 prevalence.
    pub prev2_only_fraction: f64,
    pub strata: bool,
    pub truth: TruthSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_countries: 20,
            n_regions: 4,
            first_year: 2000,
            n_years: 10,
            n_covariates: 1,
            studies_per_country: 3,
            data_free_countries: 0,
            micro_fraction: 0.5,
            micro_n: [150, 400],
            agg_n: [300, 3000],
            cluster_size: 10,
            cluster_copy: 0.3,
            weight_sd: 0.3,
            national_fraction: 0.7,
            full_age_fraction: 0.8,
            prev2_only_fraction: 0.0,
            strata: false,
            truth: TruthSpec::default(),
        }
    }
}

/// Ground truth of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Parameter state that generated the data (study effects included).
    pub state: ModelState,
    pub functional_names: Vec<String>,
    /// Population-level functionals per country-year, aligned with `functional_names`.
    pub functionals: Vec<f64>,
    /// Expected `(mean, prev2, prev3)` of each study's own density.
    pub study_functionals: BTreeMap<String, [f64; 3]>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let t = &self.truth;
        let k = t.thetas.len();
        let fail = |m: &str| Err(Error::Config(format!("infeasible synthetic spec: {m}")));
        if k < 2 || t.sigmas.len() != k || t.weights.len() != k {
            return fail("thetas, sigmas and weights need one entry per component (at least two)");
        }
        if t.thetas.windows(2).any(|w| w[0] >= w[1]) || t.sigmas.iter().any(|s| *s <= 0.0) {
            return fail("thetas must increase and sigmas be positive");
        }
        if t.weights.iter().any(|w| *w <= 0.0) || (t.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("weights must be positive and sum to one");
        }
        if self.n_regions == 0 || self.n_countries < self.n_regions {
            return fail("need at least one country per region");
        }
        if self.data_free_countries >= self.n_countries {
            return fail("every country is data-free");
        }
        if self.n_years < 3 {
            return fail("need at least three years");
        }
        if self.micro_n[0] < 2
            || self.micro_n[0] > self.micro_n[1]
            || self.agg_n[0] < 2
            || self.agg_n[0] > self.agg_n[1]
        {
            return fail("sample size ranges are empty");
        }
        if self.cluster_size == 0 || !(0.0..=1.0).contains(&self.cluster_copy) {
            return fail("cluster settings out of range");
        }
        for p in [
            self.micro_fraction,
            self.national_fraction,
            self.full_age_fraction,
            self.prev2_only_fraction,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail("fractions must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

pub(crate) fn draw_mixture<R: Rng + ?Sized>(thetas: &[f64], sigmas: &[f64], w: &[f64], rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = w.len() - 1;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            k = i;
            break;
        }
    }
    let z: f64 = rng.sample(StandardNormal);
    thetas[k] + sigmas[k] * z
}

/// Clustered sample with cluster-level survey weights.
fn clustered_sample<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    n: usize,
    thetas: &[f64],
    sigmas: &[f64],
    w: &[f64],
    rng: &mut R,
) -> Vec<MicroObs> {
    let weight_dist = LogNormal::new(0.0, spec.weight_sd.max(1e-12)).expect("valid lognormal");
    let mut out = Vec::with_capacity(n);
    let mut cluster = 0;
    while out.len() < n {
        let weight = if spec.weight_sd > 0.0 {
            weight_dist.sample(rng)
        } else {
            1.0
        };
        let first = draw_mixture(thetas, sigmas, w, rng);
        for k in 0..spec.cluster_size.min(n - out.len()) {
            let value = if k == 0 || rng.random::<f64>() < spec.cluster_copy {
                first
            } else {
                draw_mixture(thetas, sigmas, w, rng)
            };
            out.push(MicroObs {
                value,
                weight,
                cluster: Some(format!("k{cluster}")),
            });
        }
        cluster += 1;
    }
    out
}

fn weighted_summaries(obs: &[MicroObs]) -> [f64; 3] {
    let total: f64 = obs.iter().map(|o| o.weight).sum();
    let mut out = [0.0; 3];
    for o in obs {
        out[0] += o.weight * o.value;
        if o.value <= -2.0 {
            out[1] += o.weight;
        }
        if o.value <= -3.0 {
            out[2] += o.weight;
        }
    }
    out.map(|v| v / total)
}

/// Weighted `(mean, prev2, prev3)` of a microdata study.
pub fn micro_summaries(obs: &[MicroObs]) -> [f64; 3] {
    weighted_summaries(obs)
}

/// Draws a synthetic dataset and its ground truth.
pub fn simulate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(DatasetBundle, Truth)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let t = &spec.truth;
    let k = t.thetas.len();

    let countries: Vec<String> = (0..spec.n_countries).map(|j| format!("C{:02}", j + 1)).collect();
    let region_of: BTreeMap<String, String> = countries
        .iter()
        .enumerate()
        .map(|(j, c)| (c.clone(), format!("R{}", j % spec.n_regions + 1)))
        .collect();
    let last_year = spec.first_year + spec.n_years as i32 - 1;
    let covariate_names: Vec<String> = (1..=spec.n_covariates).map(|p| format!("x{p}")).collect();
    let mut covariates = BTreeMap::new();
    for c in &countries {
        let offsets: Vec<f64> = (0..spec.n_covariates).map(|_| rng.sample(StandardNormal)).collect();
        for y in spec.first_year..=last_year {
            let row = offsets
                .iter()
                .map(|o| {
                    let e: f64 = rng.sample(StandardNormal);
                    o + 0.1 * (y - spec.first_year) as f64 + 0.1 * e
                })
                .collect();
            covariates.insert((c.clone(), y), row);
        }
    }
    let mut populations: BTreeMap<PopulationKey, f64> = BTreeMap::new();
    for c in &countries {
        let base = rng.random_range(1.0e6..5.0e7_f64).round();
        let share: f64 = rng.random_range(0.2..0.6);
        for (i, y) in (spec.first_year..=last_year).enumerate() {
            let total = (base * (1.0 + 0.02 * i as f64)).round();
            if spec.strata {
                let urban = (total * (share + 0.01 * i as f64)).round();
                populations.insert((c.clone(), y, Stratum::Urban), urban);
                populations.insert((c.clone(), y, Stratum::Rural), total - urban);
            }
            populations.insert((c.clone(), y, Stratum::All), total);
        }
    }
    let mut hier = HierarchyConfig::new(
        &region_of,
        spec.first_year,
        last_year,
        covariate_names.clone(),
        &covariates,
    )?;
    if spec.strata {
        let shares = urban_shares(&hier, &populations)?;
        hier = hier.with_urban_share(shares)?;
    }

    // study designs
    let with_data = spec.n_countries - spec.data_free_countries;
    let mut records = Vec::new();
    let mut designs = Vec::new();
    for j in 0..with_data {
        for s in 0..spec.studies_per_country {
            let year = rng.random_range(0..spec.n_years);
            let stratum = if spec.strata {
                *[Stratum::All, Stratum::Urban, Stratum::Rural]
                    .choose(&mut rng)
                    .expect("nonempty")
            } else {
                Stratum::All
            };
            let design = StudyDesign {
                country: j,
                year,
                national: rng.random::<f64>() < spec.national_fraction,
                full_age: rng.random::<f64>() < spec.full_age_fraction,
                stratum,
            };
            let micro = rng.random::<f64>() < spec.micro_fraction;
            records.push((format!("{}-{}", countries[j], s + 1), micro));
            designs.push(design);
        }
    }
    let options = ModelOptions {
        components: k,
        strata: spec.strata,
        main_effects: false,
    };
    let ctx = ModelContext {
        hier,
        designs,
        options,
        bounds: PriorBounds::default(),
    };

    // true parameters
    let dims = ModelDims::new(&ctx.hier, ctx.designs.len(), options)?;
    let mut state = ModelState::zeros(&dims);
    state.thetas = t.thetas.clone();
    state.sigmas = t.sigmas.clone();
    let base = inverse_stick_break(&Weights::new(t.weights.clone())?)?;
    let rw2 = Rw2Sampler::new(spec.n_years)?;
    let n_regions = ctx.hier.n_regions();
    for (m, c) in state.effects.components.iter_mut().enumerate() {
        c.delta_g = base[m];
        c.phi_g = 0.0;
        for kk in 0..n_regions {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            c.delta_r[kk] = c.delta_g + t.tau_delta_r * z1;
            c.phi_r[kk] = c.phi_g + t.tau_phi_r * z2;
            c.u_r[kk] = rw2.draw(t.lambda_r, &mut rng);
        }
        c.u_g = rw2.draw(t.lambda_g, &mut rng);
        for j in 0..spec.n_countries {
            let kk = ctx.hier.region_of(j);
            c.delta_c[j] = c.delta_r[kk] + t.tau_delta_c * draw_t(4.0, &mut rng);
            c.phi_c[j] = c.phi_r[kk] + t.tau_phi_c * draw_t(4.0, &mut rng);
            c.u_c[j] = rw2.draw(t.lambda_c, &mut rng);
        }
        for b in c.beta.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *b = t.beta_sd * z;
        }
        for (i, d) in ctx.designs.iter().enumerate() {
            let v = if d.national { t.v_n } else { t.v_s };
            c.a[i] = v * draw_t(4.0, &mut rng);
            if !d.full_age {
                c.b[i] = t.v_b * draw_t(4.0, &mut rng);
            }
        }
        if spec.strata {
            let mut s = StrataEffects {
                gamma_c: vec![0.0; spec.n_countries],
                gamma_r: vec![0.0; n_regions],
                gamma_g: 0.0,
                rho_c: vec![0.0; spec.n_countries],
                rho_r: vec![0.0; n_regions],
                rho_g: 0.0,
                c: vec![0.0; ctx.designs.len()],
            };
            let z: f64 = rng.sample(StandardNormal);
            // urban children are taller: less mass in the low components
            s.gamma_g = 0.1 + 0.05 * z;
            for kk in 0..n_regions {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                s.gamma_r[kk] = s.gamma_g + t.tau_gamma * z1;
                s.rho_r[kk] = s.rho_g + t.tau_rho * z2;
            }
            for j in 0..spec.n_countries {
                let kk = ctx.hier.region_of(j);
                s.gamma_c[j] = s.gamma_r[kk] + t.tau_gamma * draw_t(4.0, &mut rng);
                s.rho_c[j] = s.rho_r[kk] + t.tau_rho * draw_t(4.0, &mut rng);
            }
            for (i, d) in ctx.designs.iter().enumerate() {
                if d.has_stratum_error() {
                    s.c[i] = t.v_c * draw_t(4.0, &mut rng);
                }
            }
            c.strata = Some(s);
        }
    }
    for h in state.hyper.components.iter_mut() {
        h.tau_delta_c = t.tau_delta_c;
        h.tau_delta_r = t.tau_delta_r;
        h.tau_phi_c = t.tau_phi_c;
        h.tau_phi_r = t.tau_phi_r;
        h.lambda_c = t.lambda_c;
        h.lambda_r = t.lambda_r;
        h.lambda_g = t.lambda_g;
        h.v_n = t.v_n;
        h.v_s = t.v_s;
        h.v_b = t.v_b;
        if let Some(s) = h.strata.as_mut() {
            s.tau_gamma_c = t.tau_gamma;
            s.tau_gamma_r = t.tau_gamma;
            s.tau_rho_c = t.tau_rho;
            s.tau_rho_r = t.tau_rho;
            s.v_c = t.v_c;
        }
    }

    // observations
    let mut studies = Vec::with_capacity(records.len());
    let mut study_functionals = BTreeMap::new();
    for (i, (id, micro)) in records.into_iter().enumerate() {
        let d = ctx.designs[i];
        let w = study_weights(&state, &ctx, i)?;
        study_functionals.insert(
            id.clone(),
            crate::sampler::mixture_functionals(&state.thetas, &state.sigmas, w.as_slice()),
        );
        let data = if micro {
            let n = rng.random_range(spec.micro_n[0]..=spec.micro_n[1]);
            StudyData::Micro(clustered_sample(
                spec,
                n,
                &state.thetas,
                &state.sigmas,
                w.as_slice(),
                &mut rng,
            ))
        } else {
            let n = rng.random_range(spec.agg_n[0]..=spec.agg_n[1]);
            let obs = clustered_sample(spec, n as usize, &state.thetas, &state.sigmas, w.as_slice(), &mut rng);
            let [mean, p2, p3] = weighted_summaries(&obs);
            let summaries = if rng.random::<f64>() < spec.prev2_only_fraction {
                Summaries {
                    prev2: Some(p2),
                    ..Summaries::default()
                }
            } else {
                Summaries {
                    mean: Some(mean),
                    prev2: Some(p2),
                    prev3: Some(p3),
                }
            };
            StudyData::Aggregate {
                summaries,
                nominal_n: n,
            }
        };
        studies.push(StudyRecord {
            study_id: id,
            country: countries[d.country].clone(),
            year: spec.first_year + d.year as i32,
            national: d.national,
            full_age: d.full_age,
            stratum: d.stratum,
            data,
            ess: 0.0,
        });
    }

    let bundle = DatasetBundle::from_parts(
        studies,
        region_of,
        covariate_names,
        covariates,
        populations,
        spec.strata,
    )?;
    let mut functionals = Vec::new();
    compute_functionals(&state, &ctx, &mut functionals)?;
    let truth = Truth {
        state,
        functional_names: crate::sampler::functional_names(&ctx),
        functionals,
        study_functionals,
    };
    Ok((bundle, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Statistic;
    use crate::sampler::{functional_index, mc_diagnostics};

    #[test]
    fn degenerate_spec_shares_one_density() {
        let spec = SyntheticSpec {
            n_countries: 3,
            n_regions: 1,
            studies_per_country: 4,
            micro_fraction: 1.0,
            micro_n: [2000, 2000],
            cluster_copy: 0.0,
            weight_sd: 0.0,
            truth: TruthSpec {
                tau_delta_c: 0.0,
                tau_delta_r: 0.0,
                tau_phi_c: 0.0,
                tau_phi_r: 0.0,
                lambda_c: f64::INFINITY,
                lambda_r: f64::INFINITY,
                lambda_g: f64::INFINITY,
                v_n: 0.0,
                v_s: 0.0,
                v_b: 0.0,
                beta_sd: 0.0,
                ..TruthSpec::default()
            },
            ..SyntheticSpec::default()
        };
        let (bundle, truth) = simulate_synthetic(&spec, 3).unwrap();
        let first = truth.study_functionals.values().next().unwrap();
        for f in truth.study_functionals.values() {
            for s in 0..3 {
                assert!((f[s] - first[s]).abs() < 1e-12);
            }
        }
        // large samples concentrate near the shared truth
        for s in &bundle.studies {
            let StudyData::Micro(obs) = &s.data else { panic!() };
            let m = micro_summaries(obs);
            assert!((m[0] - first[0]).abs() < 0.15, "{} vs {}", m[0], first[0]);
            assert!((m[1] - first[1]).abs() < 0.05);
        }
    }

    #[test]
    fn aggregate_prevalences_are_ordered() {
        let spec = SyntheticSpec {
            micro_fraction: 0.0,
            ..SyntheticSpec::default()
        };
        let (bundle, _) = simulate_synthetic(&spec, 11).unwrap();
        let mut n = 0;
        for s in &bundle.studies {
            if let StudyData::Aggregate { summaries, .. } = &s.data {
                assert!(summaries.prev3.unwrap() <= summaries.prev2.unwrap());
                n += 1;
            }
        }
        assert_eq!(n, 60);
    }

    #[test]
    fn simulated_study_means_are_unbiased() {
        // one country-year; every study draws from the population density (no study effects)
        let spec = SyntheticSpec {
            n_countries: 1,
            n_regions: 1,
            n_years: 3,
            studies_per_country: 400,
            micro_fraction: 1.0,
            micro_n: [100, 100],
            full_age_fraction: 1.0,
            truth: TruthSpec {
                lambda_c: f64::INFINITY,
                lambda_r: f64::INFINITY,
                lambda_g: f64::INFINITY,
                tau_phi_c: 0.0,
                tau_phi_r: 0.0,
                v_n: 0.0,
                v_s: 0.0,
                beta_sd: 0.0,
                ..TruthSpec::default()
            },
            ..SyntheticSpec::default()
        };
        let (bundle, truth) = simulate_synthetic(&spec, 5).unwrap();
        let means: Vec<f64> = bundle
            .studies
            .iter()
            .map(|s| match &s.data {
                StudyData::Micro(obs) => micro_summaries(obs)[0],
                _ => unreachable!(),
            })
            .collect();
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        let mcse = mc_diagnostics(&means).unwrap().sd / (means.len() as f64).sqrt();
        let ctx = bundle.context(ModelOptions::default(), None).unwrap();
        // flat trends and no slopes: every year shares the same truth
        let target = truth.functionals[functional_index(&ctx, 0, 0, Statistic::Mean)];
        assert!((avg - target).abs() < 3.0 * mcse, "{avg} vs {target} ± {mcse}");
    }
}
