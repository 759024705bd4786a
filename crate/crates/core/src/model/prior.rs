//! Prior log density of the full parameter state.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

use super::penalty::{mean_and_slope, second_difference_energy};
use super::state::{ComponentHyper, ModelState};
use super::ModelContext;

pub const T_DF: f64 = 4.0;

/// Location-scale Student-t log density.
pub fn t_logpdf(x: f64, loc: f64, scale: f64, df: f64) -> f64 {
    let z = (x - loc) / scale;
    ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - scale.ln()
        - (df + 1.0) / 2.0 * (1.0 + z * z / df).ln()
}

pub fn t4_logpdf(x: f64, loc: f64, scale: f64) -> f64 {
    t_logpdf(x, loc, scale, T_DF)
}

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.918_938_533_204_672_8
}

/// Improper RW2 log density `((T−2)/2) log λ − (λ/2) uᵀPu`.
pub fn rw2_logpdf(u: &[f64], lambda: f64) -> f64 {
    (u.len() as f64 - 2.0) / 2.0 * lambda.ln() - lambda / 2.0 * second_difference_energy(u)
}

/// Log prior of `log λ` under a flat prior on `λ^{-1/2}`: `p(λ) ∝ λ^{-3/2}`, so
/// `p(log λ) ∝ λ^{-1/2}`.
pub fn log_lambda_prior(lambda: f64) -> f64 {
    -0.5 * lambda.ln()
}

/// Tolerance for the linear constraints (u mean/slope, zero-sum main-effect contrasts).
pub const CONSTRAINT_TOL: f64 = 1e-8;

fn reject(msg: impl Into<String>) -> Error {
    Error::RejectedState(msg.into())
}

/// Checks every hard constraint; the first violation is reported.
pub fn check_constraints(state: &ModelState, ctx: &ModelContext) -> Result<()> {
    let b = &ctx.bounds;
    let k = ctx.options.components;
    if state.thetas.len() != k || state.sigmas.len() != k {
        return Err(reject("basis has the wrong number of components"));
    }
    if state.thetas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(reject("component locations are not strictly increasing"));
    }
    if state.thetas.iter().any(|&t| !(t >= b.theta_lo && t <= b.theta_hi)) {
        return Err(reject("component location outside prior bounds"));
    }
    if state.sigmas.iter().any(|&s| !(s > 0.0 && s <= b.sigma_cap)) {
        return Err(reject("component scale outside (0, cap]"));
    }
    for (m, h) in state.hyper.components.iter().enumerate() {
        check_component_hyper(m, h, b)?;
    }
    if let Some(h) = &state.hyper.main {
        for s in [h.tau_delta0_c, h.tau_delta0_r, h.tau_phi0_c, h.tau_phi0_r] {
            check_scale(s, b, "main-effect tau")?;
        }
    }
    for (m, c) in state.effects.components.iter().enumerate() {
        let us = c.u_c.iter().chain(&c.u_r).chain(std::iter::once(&c.u_g));
        for u in us {
            let (mean, slope) = mean_and_slope(u);
            if mean.abs() > CONSTRAINT_TOL || slope.abs() > CONSTRAINT_TOL {
                return Err(reject(format!("u vector for score {m} has nonzero mean/slope")));
            }
        }
        for (i, d) in ctx.designs.iter().enumerate() {
            if d.full_age && c.b[i] != 0.0 {
                return Err(reject(format!("full-age study {i} has nonzero age effect")));
            }
            if let Some(s) = &c.strata {
                if !d.has_stratum_error() && s.c[i] != 0.0 {
                    return Err(reject(format!("combined-stratum study {i} has nonzero stratum error")));
                }
            }
        }
    }
    if state.effects.main.is_some() {
        check_zero_sum(state)?;
    }
    Ok(())
}

fn check_scale(s: f64, b: &super::PriorBounds, what: &str) -> Result<()> {
    if !(s > b.scale_min && s <= b.scale_max) {
        return Err(reject(format!(
            "{what} = {s} outside ({}, {}]",
            b.scale_min, b.scale_max
        )));
    }
    Ok(())
}

fn check_component_hyper(m: usize, h: &ComponentHyper, b: &super::PriorBounds) -> Result<()> {
    for (s, what) in [
        (h.tau_delta_c, "tau_delta_c"),
        (h.tau_delta_r, "tau_delta_r"),
        (h.tau_phi_c, "tau_phi_c"),
        (h.tau_phi_r, "tau_phi_r"),
        (h.v_n, "v_n"),
        (h.v_s, "v_s"),
        (h.v_b, "v_b"),
    ] {
        check_scale(s, b, what)?;
    }
    if let Some(s) = &h.strata {
        for v in [s.tau_gamma_c, s.tau_gamma_r, s.tau_rho_c, s.tau_rho_r, s.v_c] {
            check_scale(v, b, "strata scale")?;
        }
    }
    for l in [h.lambda_c, h.lambda_r, h.lambda_g] {
        if !(l > 0.0 && l.ln() >= b.log_lambda_min && l.ln() <= b.log_lambda_max) {
            return Err(reject(format!(
                "lambda {l} outside [exp({}), exp({})]",
                b.log_lambda_min, b.log_lambda_max
            )));
        }
    }
    if !(h.lambda_c < h.lambda_r && h.lambda_r < h.lambda_g) {
        return Err(reject(format!("precision ordering violated for score {m}")));
    }
    if !(h.v_n < h.v_s) {
        return Err(reject(format!(
            "national scale not below subnational scale for score {m}"
        )));
    }
    Ok(())
}

fn check_zero_sum(state: &ModelState) -> Result<()> {
    let comps = &state.effects.components;
    let sums = |get: &dyn Fn(usize) -> f64| -> f64 { (0..comps.len()).map(get).sum() };
    let nc = comps[0].delta_c.len();
    let nr = comps[0].delta_r.len();
    let p = comps[0].beta.len();
    for j in 0..nc {
        if sums(&|m| comps[m].delta_c[j]).abs() > CONSTRAINT_TOL || sums(&|m| comps[m].phi_c[j]).abs() > CONSTRAINT_TOL
        {
            return Err(reject(format!(
                "component contrasts for country {j} do not sum to zero"
            )));
        }
    }
    for k in 0..nr {
        if sums(&|m| comps[m].delta_r[k]).abs() > CONSTRAINT_TOL || sums(&|m| comps[m].phi_r[k]).abs() > CONSTRAINT_TOL
        {
            return Err(reject(format!("component contrasts for region {k} do not sum to zero")));
        }
    }
    if sums(&|m| comps[m].delta_g).abs() > CONSTRAINT_TOL || sums(&|m| comps[m].phi_g).abs() > CONSTRAINT_TOL {
        return Err(reject("global component contrasts do not sum to zero"));
    }
    for q in 0..p {
        if sums(&|m| comps[m].beta[q]).abs() > CONSTRAINT_TOL {
            return Err(reject("covariate contrasts do not sum to zero"));
        }
    }
    Ok(())
}

/// Log prior density (up to the constants of flat priors). Constraint violations give
/// [`Error::RejectedState`].
pub fn log_prior(state: &ModelState, ctx: &ModelContext) -> Result<f64> {
    check_constraints(state, ctx)?;
    let hier = &ctx.hier;
    let mut lp = 0.0;
    for (c, h) in state.effects.components.iter().zip(&state.hyper.components) {
        for j in 0..hier.n_countries() {
            let k = hier.region_of(j);
            lp += t4_logpdf(c.delta_c[j], c.delta_r[k], h.tau_delta_c);
            lp += t4_logpdf(c.phi_c[j], c.phi_r[k], h.tau_phi_c);
        }
        for k in 0..hier.n_regions() {
            lp += normal_logpdf(c.delta_r[k], c.delta_g, h.tau_delta_r);
            lp += normal_logpdf(c.phi_r[k], c.phi_g, h.tau_phi_r);
        }
        lp += c.u_c.iter().map(|u| rw2_logpdf(u, h.lambda_c)).sum::<f64>();
        lp += c.u_r.iter().map(|u| rw2_logpdf(u, h.lambda_r)).sum::<f64>();
        lp += rw2_logpdf(&c.u_g, h.lambda_g);
        for l in [h.lambda_c, h.lambda_r, h.lambda_g] {
            // density of λ itself: λ^{-3/2}
            lp += -1.5 * l.ln();
        }
        for (i, d) in ctx.designs.iter().enumerate() {
            let v = if d.national { h.v_n } else { h.v_s };
            lp += t4_logpdf(c.a[i], 0.0, v);
            if !d.full_age {
                lp += t4_logpdf(c.b[i], 0.0, h.v_b);
            }
        }
        if let (Some(s), Some(sh)) = (&c.strata, &h.strata) {
            for j in 0..hier.n_countries() {
                let k = hier.region_of(j);
                lp += t4_logpdf(s.gamma_c[j], s.gamma_r[k], sh.tau_gamma_c);
                lp += t4_logpdf(s.rho_c[j], s.rho_r[k], sh.tau_rho_c);
            }
            for k in 0..hier.n_regions() {
                lp += normal_logpdf(s.gamma_r[k], s.gamma_g, sh.tau_gamma_r);
                lp += normal_logpdf(s.rho_r[k], s.rho_g, sh.tau_rho_r);
            }
            for (i, d) in ctx.designs.iter().enumerate() {
                if d.has_stratum_error() {
                    lp += t4_logpdf(s.c[i], 0.0, sh.v_c);
                }
            }
        }
    }
    if let (Some(e), Some(h)) = (&state.effects.main, &state.hyper.main) {
        for j in 0..hier.n_countries() {
            let k = hier.region_of(j);
            lp += t4_logpdf(e.delta0_c[j], e.delta0_r[k], h.tau_delta0_c);
            lp += t4_logpdf(e.phi0_c[j], e.phi0_r[k], h.tau_phi0_c);
        }
        for k in 0..hier.n_regions() {
            lp += normal_logpdf(e.delta0_r[k], e.delta0_g, h.tau_delta0_r);
            lp += normal_logpdf(e.phi0_r[k], e.phi0_g, h.tau_phi0_r);
        }
    }
    if !lp.is_finite() {
        return Err(Error::numeric("log prior", format!("non-finite value {lp}")));
    }
    Ok(lp)
}
