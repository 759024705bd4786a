//! Parameter blocks: coordinates, local prior terms, and the studies each block touches.

use serde::{Deserialize, Serialize};

use crate::model::{normal_logpdf, project_u_in_place, second_difference_energy, t4_logpdf, ModelContext, ModelState};

/// Phase group a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockGroup {
    /// Study-level random effects (a, b, c).
    StudyEffects,
    /// Mixture component locations and scales.
    Basis,
    /// Country effects and covariate coefficients.
    CountryEffects,
    /// Region and global means, region/global trends, and all variance parameters.
    Hierarchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Country,
    Region,
    Global,
}

/// Variance parameter updated on the log scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleId {
    TauDeltaC(usize),
    TauDeltaR(usize),
    TauPhiC(usize),
    TauPhiR(usize),
    VNational(usize),
    VSubnational(usize),
    VAge(usize),
    TauGammaC(usize),
    TauGammaR(usize),
    TauRhoC(usize),
    TauRhoR(usize),
    VStratum(usize),
    TauDelta0C,
    TauDelta0R,
    TauPhi0C,
    TauPhi0R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockId {
    Study(usize),
    /// Intercept and slope of one country; `None` covers every component under a
    /// sum-to-zero constraint.
    CountryLevel {
        j: usize,
        m: Option<usize>,
    },
    CountryU {
        j: usize,
        m: usize,
    },
    CountryStrata {
        j: usize,
        m: usize,
    },
    MainCountry {
        j: usize,
    },
    Beta {
        m: Option<usize>,
    },
    MainBeta,
    Basis,
    RegionU {
        k: usize,
        m: usize,
    },
    GlobalU {
        m: usize,
    },
    Scale(ScaleId),
    LambdaU {
        level: Level,
        m: usize,
    },
}

/// Studies whose likelihood depends on a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Affected {
    None,
    One(usize),
    Country(usize),
    Region(usize),
    All,
}

impl BlockId {
    pub fn group(&self) -> BlockGroup {
        match self {
            BlockId::Study(_) => BlockGroup::StudyEffects,
            BlockId::Basis => BlockGroup::Basis,
            BlockId::CountryLevel { .. }
            | BlockId::CountryU { .. }
            | BlockId::CountryStrata { .. }
            | BlockId::MainCountry { .. }
            | BlockId::Beta { .. }
            | BlockId::MainBeta => BlockGroup::CountryEffects,
            BlockId::RegionU { .. } | BlockId::GlobalU { .. } | BlockId::Scale(_) | BlockId::LambdaU { .. } => {
                BlockGroup::Hierarchy
            }
        }
    }

    /// Label used in acceptance logs.
    pub fn kind(&self) -> &'static str {
        match self {
            BlockId::Study(_) => "study_effects",
            BlockId::CountryLevel { .. } => "country_level",
            BlockId::CountryU { .. } => "country_trend",
            BlockId::CountryStrata { .. } => "country_strata",
            BlockId::MainCountry { .. } => "main_country",
            BlockId::Beta { .. } => "covariates",
            BlockId::MainBeta => "main_covariates",
            BlockId::Basis => "basis",
            BlockId::RegionU { .. } => "region_trend",
            BlockId::GlobalU { .. } => "global_trend",
            BlockId::Scale(_) => "scales",
            BlockId::LambdaU { .. } => "precision_trend",
        }
    }

    pub fn affected(&self) -> Affected {
        match *self {
            BlockId::Study(i) => Affected::One(i),
            BlockId::CountryLevel { j, .. }
            | BlockId::CountryU { j, .. }
            | BlockId::CountryStrata { j, .. }
            | BlockId::MainCountry { j } => Affected::Country(j),
            BlockId::RegionU { k, .. } => Affected::Region(k),
            BlockId::Beta { .. } | BlockId::MainBeta | BlockId::Basis | BlockId::GlobalU { .. } => Affected::All,
            BlockId::LambdaU { .. } => Affected::All,
            BlockId::Scale(_) => Affected::None,
        }
    }

    /// Whether increments are projected onto a constraint subspace.
    pub fn projected(&self) -> bool {
        matches!(
            self,
            BlockId::CountryLevel { m: None, .. }
                | BlockId::Beta { m: None }
                | BlockId::CountryU { .. }
                | BlockId::RegionU { .. }
                | BlockId::GlobalU { .. }
        )
    }

    /// Initial proposal standard deviations per coordinate.
    pub fn init_sd(&self, state: &ModelState, ctx: &ModelContext) -> Vec<f64> {
        let n = self.read(state, ctx).len();
        let sd = match self {
            BlockId::Study(_) => 0.1,
            BlockId::CountryLevel { .. } | BlockId::CountryStrata { .. } | BlockId::MainCountry { .. } => 0.1,
            BlockId::CountryU { .. } | BlockId::RegionU { .. } | BlockId::GlobalU { .. } => 0.03,
            BlockId::Beta { .. } | BlockId::MainBeta => 0.05,
            BlockId::Basis => 0.02,
            BlockId::Scale(_) => 0.2,
            BlockId::LambdaU { .. } => 0.3,
        };
        vec![sd; n]
    }

    /// Block coordinates (log scale for σ and variance parameters).
    pub fn read(&self, state: &ModelState, ctx: &ModelContext) -> Vec<f64> {
        let comps = &state.effects.components;
        match *self {
            BlockId::Study(i) => {
                let d = ctx.designs[i];
                let mut out: Vec<f64> = comps.iter().map(|c| c.a[i]).collect();
                if !d.full_age {
                    out.extend(comps.iter().map(|c| c.b[i]));
                }
                if d.has_stratum_error() && ctx.options.strata {
                    out.extend(comps.iter().map(|c| c.strata.as_ref().expect("strata").c[i]));
                }
                out
            }
            BlockId::CountryLevel { j, m: Some(m) } => vec![comps[m].delta_c[j], comps[m].phi_c[j]],
            BlockId::CountryLevel { j, m: None } => comps
                .iter()
                .map(|c| c.delta_c[j])
                .chain(comps.iter().map(|c| c.phi_c[j]))
                .collect(),
            BlockId::CountryU { j, m } => comps[m].u_c[j].clone(),
            BlockId::CountryStrata { j, m } => {
                let s = comps[m].strata.as_ref().expect("strata");
                vec![s.gamma_c[j], s.rho_c[j]]
            }
            BlockId::MainCountry { j } => {
                let e = state.effects.main.as_ref().expect("main effects");
                vec![e.delta0_c[j], e.phi0_c[j]]
            }
            BlockId::Beta { m: Some(m) } => comps[m].beta.clone(),
            BlockId::Beta { m: None } => comps.iter().flat_map(|c| c.beta.iter().copied()).collect(),
            BlockId::MainBeta => state.effects.main.as_ref().expect("main effects").beta0.clone(),
            BlockId::Basis => state
                .thetas
                .iter()
                .copied()
                .chain(state.sigmas.iter().map(|s| s.ln()))
                .collect(),
            BlockId::RegionU { k, m } => comps[m].u_r[k].clone(),
            BlockId::GlobalU { m } => comps[m].u_g.clone(),
            BlockId::Scale(id) => vec![scale_ref(state, id).ln()],
            BlockId::LambdaU { level, m } => vec![lambda(state, level, m).ln()],
        }
    }

    pub fn write(&self, state: &mut ModelState, ctx: &ModelContext, x: &[f64]) {
        let n_m = state.effects.components.len();
        match *self {
            BlockId::Study(i) => {
                let d = ctx.designs[i];
                let mut it = x.iter().copied();
                for c in state.effects.components.iter_mut() {
                    c.a[i] = it.next().expect("length");
                }
                if !d.full_age {
                    for c in state.effects.components.iter_mut() {
                        c.b[i] = it.next().expect("length");
                    }
                }
                if d.has_stratum_error() && ctx.options.strata {
                    for c in state.effects.components.iter_mut() {
                        c.strata.as_mut().expect("strata").c[i] = it.next().expect("length");
                    }
                }
            }
            BlockId::CountryLevel { j, m: Some(m) } => {
                let c = &mut state.effects.components[m];
                c.delta_c[j] = x[0];
                c.phi_c[j] = x[1];
            }
            BlockId::CountryLevel { j, m: None } => {
                for (m, c) in state.effects.components.iter_mut().enumerate() {
                    c.delta_c[j] = x[m];
                    c.phi_c[j] = x[n_m + m];
                }
            }
            BlockId::CountryU { j, m } => state.effects.components[m].u_c[j].copy_from_slice(x),
            BlockId::CountryStrata { j, m } => {
                let s = state.effects.components[m].strata.as_mut().expect("strata");
                s.gamma_c[j] = x[0];
                s.rho_c[j] = x[1];
            }
            BlockId::MainCountry { j } => {
                let e = state.effects.main.as_mut().expect("main effects");
                e.delta0_c[j] = x[0];
                e.phi0_c[j] = x[1];
            }
            BlockId::Beta { m: Some(m) } => state.effects.components[m].beta.copy_from_slice(x),
            BlockId::Beta { m: None } => {
                let p = x.len() / n_m;
                for (m, c) in state.effects.components.iter_mut().enumerate() {
                    c.beta.copy_from_slice(&x[m * p..(m + 1) * p]);
                }
            }
            BlockId::MainBeta => state
                .effects
                .main
                .as_mut()
                .expect("main effects")
                .beta0
                .copy_from_slice(x),
            BlockId::Basis => {
                let k = state.thetas.len();
                state.thetas.copy_from_slice(&x[..k]);
                for (s, l) in state.sigmas.iter_mut().zip(&x[k..]) {
                    *s = l.exp();
                }
            }
            BlockId::RegionU { k, m } => state.effects.components[m].u_r[k].copy_from_slice(x),
            BlockId::GlobalU { m } => state.effects.components[m].u_g.copy_from_slice(x),
            BlockId::Scale(id) => *scale_mut(state, id) = x[0].exp(),
            BlockId::LambdaU { level, m } => *lambda_mut(state, level, m) = x[0].exp(),
        }
    }

    /// Projects an increment onto the block's constraint subspace.
    pub fn project(&self, n_m: usize, step: &mut [f64]) {
        match self {
            BlockId::CountryU { .. } | BlockId::RegionU { .. } | BlockId::GlobalU { .. } => project_u_in_place(step),
            BlockId::CountryLevel { m: None, .. } => {
                center(&mut step[..n_m]);
                center(&mut step[n_m..]);
            }
            BlockId::Beta { m: None } => {
                let p = step.len() / n_m;
                for q in 0..p {
                    let mean = (0..n_m).map(|m| step[m * p + q]).sum::<f64>() / n_m as f64;
                    for m in 0..n_m {
                        step[m * p + q] -= mean;
                    }
                }
            }
            _ => {}
        }
    }

    /// Log prior terms that involve the block, in block coordinates (including the
    /// log-Jacobian of log-scale coordinates). `-∞` outside the support.
    pub fn local_log_prior(&self, state: &ModelState, ctx: &ModelContext) -> f64 {
        let hier = &ctx.hier;
        let comps = &state.effects.components;
        let hyper = &state.hyper.components;
        match *self {
            BlockId::Study(i) => {
                let d = ctx.designs[i];
                let mut lp = 0.0;
                for (c, h) in comps.iter().zip(hyper) {
                    lp += t4_logpdf(c.a[i], 0.0, if d.national { h.v_n } else { h.v_s });
                    if !d.full_age {
                        lp += t4_logpdf(c.b[i], 0.0, h.v_b);
                    }
                    if let (Some(s), Some(sh)) = (&c.strata, &h.strata) {
                        if d.has_stratum_error() {
                            lp += t4_logpdf(s.c[i], 0.0, sh.v_c);
                        }
                    }
                }
                lp
            }
            BlockId::CountryLevel { j, m } => {
                let k = hier.region_of(j);
                let range = match m {
                    Some(m) => m..m + 1,
                    None => 0..comps.len(),
                };
                range
                    .map(|m| {
                        let (c, h) = (&comps[m], &hyper[m]);
                        t4_logpdf(c.delta_c[j], c.delta_r[k], h.tau_delta_c)
                            + t4_logpdf(c.phi_c[j], c.phi_r[k], h.tau_phi_c)
                    })
                    .sum()
            }
            BlockId::CountryU { j, m } => -0.5 * hyper[m].lambda_c * second_difference_energy(&comps[m].u_c[j]),
            BlockId::CountryStrata { j, m } => {
                let k = hier.region_of(j);
                let s = comps[m].strata.as_ref().expect("strata");
                let sh = hyper[m].strata.as_ref().expect("strata");
                t4_logpdf(s.gamma_c[j], s.gamma_r[k], sh.tau_gamma_c) + t4_logpdf(s.rho_c[j], s.rho_r[k], sh.tau_rho_c)
            }
            BlockId::MainCountry { j } => {
                let k = hier.region_of(j);
                let e = state.effects.main.as_ref().expect("main effects");
                let h = state.hyper.main.as_ref().expect("main effects");
                t4_logpdf(e.delta0_c[j], e.delta0_r[k], h.tau_delta0_c)
                    + t4_logpdf(e.phi0_c[j], e.phi0_r[k], h.tau_phi0_c)
            }
            BlockId::Beta { .. } | BlockId::MainBeta => 0.0,
            BlockId::Basis => {
                let b = &ctx.bounds;
                let sorted = state.thetas.windows(2).all(|w| w[0] < w[1]);
                let inside = state.thetas.iter().all(|&t| t >= b.theta_lo && t <= b.theta_hi);
                let capped = state.sigmas.iter().all(|&s| s > 0.0 && s <= b.sigma_cap);
                if sorted && inside && capped {
                    state.sigmas.iter().map(|s| s.ln()).sum()
                } else {
                    f64::NEG_INFINITY
                }
            }
            BlockId::RegionU { k, m } => -0.5 * hyper[m].lambda_r * second_difference_energy(&comps[m].u_r[k]),
            BlockId::GlobalU { m } => -0.5 * hyper[m].lambda_g * second_difference_energy(&comps[m].u_g),
            BlockId::Scale(id) => scale_log_prior(state, ctx, id),
            BlockId::LambdaU { .. } => unreachable!("joint precision moves use their own ratio"),
        }
    }
}

fn center(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

pub(crate) fn lambda(state: &ModelState, level: Level, m: usize) -> f64 {
    let h = &state.hyper.components[m];
    match level {
        Level::Country => h.lambda_c,
        Level::Region => h.lambda_r,
        Level::Global => h.lambda_g,
    }
}

fn lambda_mut(state: &mut ModelState, level: Level, m: usize) -> &mut f64 {
    let h = &mut state.hyper.components[m];
    match level {
        Level::Country => &mut h.lambda_c,
        Level::Region => &mut h.lambda_r,
        Level::Global => &mut h.lambda_g,
    }
}

fn scale_ref(state: &ModelState, id: ScaleId) -> f64 {
    let hc = &state.hyper.components;
    let strata = |m: usize| hc[m].strata.as_ref().expect("strata");
    let main = || state.hyper.main.as_ref().expect("main effects");
    match id {
        ScaleId::TauDeltaC(m) => hc[m].tau_delta_c,
        ScaleId::TauDeltaR(m) => hc[m].tau_delta_r,
        ScaleId::TauPhiC(m) => hc[m].tau_phi_c,
        ScaleId::TauPhiR(m) => hc[m].tau_phi_r,
        ScaleId::VNational(m) => hc[m].v_n,
        ScaleId::VSubnational(m) => hc[m].v_s,
        ScaleId::VAge(m) => hc[m].v_b,
        ScaleId::TauGammaC(m) => strata(m).tau_gamma_c,
        ScaleId::TauGammaR(m) => strata(m).tau_gamma_r,
        ScaleId::TauRhoC(m) => strata(m).tau_rho_c,
        ScaleId::TauRhoR(m) => strata(m).tau_rho_r,
        ScaleId::VStratum(m) => strata(m).v_c,
        ScaleId::TauDelta0C => main().tau_delta0_c,
        ScaleId::TauDelta0R => main().tau_delta0_r,
        ScaleId::TauPhi0C => main().tau_phi0_c,
        ScaleId::TauPhi0R => main().tau_phi0_r,
    }
}

fn scale_mut(state: &mut ModelState, id: ScaleId) -> &mut f64 {
    let hc = &mut state.hyper.components;
    match id {
        ScaleId::TauDeltaC(m) => &mut hc[m].tau_delta_c,
        ScaleId::TauDeltaR(m) => &mut hc[m].tau_delta_r,
        ScaleId::TauPhiC(m) => &mut hc[m].tau_phi_c,
        ScaleId::TauPhiR(m) => &mut hc[m].tau_phi_r,
        ScaleId::VNational(m) => &mut hc[m].v_n,
        ScaleId::VSubnational(m) => &mut hc[m].v_s,
        ScaleId::VAge(m) => &mut hc[m].v_b,
        ScaleId::TauGammaC(m) => &mut hc[m].strata.as_mut().expect("strata").tau_gamma_c,
        ScaleId::TauGammaR(m) => &mut hc[m].strata.as_mut().expect("strata").tau_gamma_r,
        ScaleId::TauRhoC(m) => &mut hc[m].strata.as_mut().expect("strata").tau_rho_c,
        ScaleId::TauRhoR(m) => &mut hc[m].strata.as_mut().expect("strata").tau_rho_r,
        ScaleId::VStratum(m) => &mut hc[m].strata.as_mut().expect("strata").v_c,
        ScaleId::TauDelta0C => &mut state.hyper.main.as_mut().expect("main effects").tau_delta0_c,
        ScaleId::TauDelta0R => &mut state.hyper.main.as_mut().expect("main effects").tau_delta0_r,
        ScaleId::TauPhi0C => &mut state.hyper.main.as_mut().expect("main effects").tau_phi0_c,
        ScaleId::TauPhi0R => &mut state.hyper.main.as_mut().expect("main effects").tau_phi0_r,
    }
}

fn country_t4_sum(hier: &crate::model::HierarchyConfig, country: &[f64], region: &[f64], scale: f64) -> f64 {
    country
        .iter()
        .enumerate()
        .map(|(j, &x)| t4_logpdf(x, region[hier.region_of(j)], scale))
        .sum()
}

fn region_normal_sum(region: &[f64], global: f64, scale: f64) -> f64 {
    region.iter().map(|&x| normal_logpdf(x, global, scale)).sum()
}

/// Log density of a variance parameter's children plus its uniform prior, in log
/// coordinates.
fn scale_log_prior(state: &ModelState, ctx: &ModelContext, id: ScaleId) -> f64 {
    let s = scale_ref(state, id);
    let b = &ctx.bounds;
    if !(s > b.scale_min && s <= b.scale_max) {
        return f64::NEG_INFINITY;
    }
    let hier = &ctx.hier;
    let comps = &state.effects.components;
    let hyper = &state.hyper.components;
    let children = match id {
        ScaleId::TauDeltaC(m) => country_t4_sum(hier, &comps[m].delta_c, &comps[m].delta_r, s),
        ScaleId::TauDeltaR(m) => region_normal_sum(&comps[m].delta_r, comps[m].delta_g, s),
        ScaleId::TauPhiC(m) => country_t4_sum(hier, &comps[m].phi_c, &comps[m].phi_r, s),
        ScaleId::TauPhiR(m) => region_normal_sum(&comps[m].phi_r, comps[m].phi_g, s),
        ScaleId::VNational(m) | ScaleId::VSubnational(m) => {
            if !(hyper[m].v_n < hyper[m].v_s) {
                return f64::NEG_INFINITY;
            }
            let national = matches!(id, ScaleId::VNational(_));
            ctx.designs
                .iter()
                .enumerate()
                .filter(|(_, d)| d.national == national)
                .map(|(i, _)| t4_logpdf(comps[m].a[i], 0.0, s))
                .sum()
        }
        ScaleId::VAge(m) => ctx
            .designs
            .iter()
            .enumerate()
            .filter(|(_, d)| !d.full_age)
            .map(|(i, _)| t4_logpdf(comps[m].b[i], 0.0, s))
            .sum(),
        ScaleId::TauGammaC(m)
        | ScaleId::TauGammaR(m)
        | ScaleId::TauRhoC(m)
        | ScaleId::TauRhoR(m)
        | ScaleId::VStratum(m) => {
            let st = comps[m].strata.as_ref().expect("strata");
            match id {
                ScaleId::TauGammaC(_) => country_t4_sum(hier, &st.gamma_c, &st.gamma_r, s),
                ScaleId::TauGammaR(_) => region_normal_sum(&st.gamma_r, st.gamma_g, s),
                ScaleId::TauRhoC(_) => country_t4_sum(hier, &st.rho_c, &st.rho_r, s),
                ScaleId::TauRhoR(_) => region_normal_sum(&st.rho_r, st.rho_g, s),
                _ => ctx
                    .designs
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.has_stratum_error())
                    .map(|(i, _)| t4_logpdf(st.c[i], 0.0, s))
                    .sum(),
            }
        }
        ScaleId::TauDelta0C | ScaleId::TauDelta0R | ScaleId::TauPhi0C | ScaleId::TauPhi0R => {
            let e = state.effects.main.as_ref().expect("main effects");
            match id {
                ScaleId::TauDelta0C => country_t4_sum(hier, &e.delta0_c, &e.delta0_r, s),
                ScaleId::TauDelta0R => region_normal_sum(&e.delta0_r, e.delta0_g, s),
                ScaleId::TauPhi0C => country_t4_sum(hier, &e.phi0_c, &e.phi0_r, s),
                _ => region_normal_sum(&e.phi0_r, e.phi0_g, s),
            }
        }
    };
    children + s.ln()
}

/// Every Metropolis block of the model, in sweep order within each group.
pub fn build_blocks(ctx: &ModelContext, has_data: &[bool]) -> Vec<BlockId> {
    let n_m = ctx.options.components - 1;
    let main = ctx.options.main_effects;
    let strata = ctx.options.strata;
    let hier = &ctx.hier;
    let mut out = Vec::new();
    out.extend((0..ctx.designs.len()).map(BlockId::Study));
    for j in 0..hier.n_countries() {
        if main {
            out.push(BlockId::CountryLevel { j, m: None });
        }
        if has_data[j] {
            if main {
                out.push(BlockId::MainCountry { j });
            }
            for m in 0..n_m {
                if !main {
                    out.push(BlockId::CountryLevel { j, m: Some(m) });
                }
                out.push(BlockId::CountryU { j, m });
                if strata {
                    out.push(BlockId::CountryStrata { j, m });
                }
            }
        }
    }
    if hier.n_covariates() > 0 {
        if main {
            out.push(BlockId::Beta { m: None });
            out.push(BlockId::MainBeta);
        } else {
            out.extend((0..n_m).map(|m| BlockId::Beta { m: Some(m) }));
        }
    }
    out.push(BlockId::Basis);
    for m in 0..n_m {
        for k in 0..hier.n_regions() {
            out.push(BlockId::RegionU { k, m });
        }
        out.push(BlockId::GlobalU { m });
    }
    for m in 0..n_m {
        for level in [Level::Country, Level::Region, Level::Global] {
            out.push(BlockId::LambdaU { level, m });
        }
    }
    for m in 0..n_m {
        let mut ids = vec![
            ScaleId::TauDeltaC(m),
            ScaleId::TauDeltaR(m),
            ScaleId::TauPhiC(m),
            ScaleId::TauPhiR(m),
            ScaleId::VNational(m),
            ScaleId::VSubnational(m),
            ScaleId::VAge(m),
        ];
        if strata {
            ids.extend([
                ScaleId::TauGammaC(m),
                ScaleId::TauGammaR(m),
                ScaleId::TauRhoC(m),
                ScaleId::TauRhoR(m),
                ScaleId::VStratum(m),
            ]);
        }
        out.extend(ids.into_iter().map(BlockId::Scale));
    }
    if main {
        out.extend(
            [
                ScaleId::TauDelta0C,
                ScaleId::TauDelta0R,
                ScaleId::TauPhi0C,
                ScaleId::TauPhi0R,
            ]
            .into_iter()
            .map(BlockId::Scale),
        );
    }
    out
}
