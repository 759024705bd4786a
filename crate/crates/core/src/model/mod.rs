//! Hierarchical model: parameter state, priors, constraints, and score assembly.

mod alpha;
mod hierarchy;
mod penalty;
mod prior;
mod state;

use serde::{Deserialize, Serialize};

pub(crate) use alpha::weights_into;
pub use alpha::{compute_alpha, compute_alpha_into, predict_weights, study_weights, AlphaTarget, WeightScratch};
pub use hierarchy::HierarchyConfig;
pub use penalty::{
    build_penalty, mean_and_slope, project_u, project_u_in_place, second_difference_energy, PenaltyMatrix, Rw2Sampler,
};
pub use prior::{
    check_constraints, log_lambda_prior, log_prior, normal_logpdf, rw2_logpdf, t4_logpdf, t_logpdf, CONSTRAINT_TOL,
    T_DF,
};
pub use state::{
    AlphaEffects, ComponentEffects, ComponentHyper, Hyperparams, MainEffects, MainHyper, ModelDims, ModelOptions,
    ModelState, ParamName, StrataEffects, StrataHyper, Stratum, StudyDesign,
};

use crate::error::Result;

/// Hard bounds of the flat priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBounds {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub sigma_cap: f64,
    /// Lower truncation of every variance scale (τ, v).
    pub scale_min: f64,
    /// Upper truncation of every variance scale.
    pub scale_max: f64,
    /// Lower truncation of `log λ`; keeps the RW2 standard deviation `1/√λ` at most `scale_max`.
    pub log_lambda_min: f64,
    pub log_lambda_max: f64,
}

impl PriorBounds {
    /// Location bounds `[min − 2·sd, max + 2·sd]` and scale cap `2·sd` from pooled data values.
    pub fn from_data(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            theta_lo: lo - 2.0 * sd,
            theta_hi: hi + 2.0 * sd,
            sigma_cap: 2.0 * sd,
            ..Self::default()
        }
    }
}

impl Default for PriorBounds {
    fn default() -> Self {
        Self {
            theta_lo: -8.0,
            theta_hi: 8.0,
            sigma_cap: 3.0,
            scale_min: 1e-5,
            scale_max: 10.0,
            log_lambda_min: -2.0 * 10f64.ln(),
            log_lambda_max: 12.0,
        }
    }
}

/// Everything fixed during a fit: hierarchy, per-record design, model switches, prior bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContext {
    pub hier: HierarchyConfig,
    pub designs: Vec<StudyDesign>,
    pub options: ModelOptions,
    pub bounds: PriorBounds,
}

impl ModelContext {
    pub fn dims(&self) -> Result<ModelDims> {
        ModelDims::new(&self.hier, self.designs.len(), self.options)
    }
}

/// Re-centers component-specific intercepts, slopes, and covariate effects to sum to zero
/// over components, moving the removed mean into the shared main effect. Scores are
/// unchanged.
pub fn apply_zero_sum(effects: &mut AlphaEffects) {
    let Some(main) = effects.main.as_mut() else {
        return;
    };
    let comps = &mut effects.components;
    let m = comps.len() as f64;
    let recenter = |comps: &mut Vec<ComponentEffects>, get: &dyn Fn(&mut ComponentEffects) -> &mut f64| -> f64 {
        let mean = comps.iter_mut().map(|c| *get(c)).sum::<f64>() / m;
        for c in comps.iter_mut() {
            *get(c) -= mean;
        }
        mean
    };
    for j in 0..main.delta0_c.len() {
        main.delta0_c[j] += recenter(comps, &|c| &mut c.delta_c[j]);
        main.phi0_c[j] += recenter(comps, &|c| &mut c.phi_c[j]);
    }
    for k in 0..main.delta0_r.len() {
        main.delta0_r[k] += recenter(comps, &|c| &mut c.delta_r[k]);
        main.phi0_r[k] += recenter(comps, &|c| &mut c.phi_r[k]);
    }
    main.delta0_g += recenter(comps, &|c| &mut c.delta_g);
    main.phi0_g += recenter(comps, &|c| &mut c.phi_g);
    for q in 0..main.beta0.len() {
        main.beta0[q] += recenter(comps, &|c| &mut c.beta[q]);
    }
}
