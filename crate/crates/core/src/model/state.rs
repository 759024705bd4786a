//! Parameter state: mixture basis, stick-breaking effects, and hyperparameters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MixtureBasis;

use super::hierarchy::HierarchyConfig;

/// Population stratum a record or prediction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    #[serde(alias = "combined")]
    All,
    Urban,
    Rural,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Urban => "urban",
            Stratum::Rural => "rural",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" | "combined" => Ok(Stratum::All),
            "urban" => Ok(Stratum::Urban),
            "rural" => Ok(Stratum::Rural),
            other => Err(Error::InvalidArgument(format!("unknown stratum '{other}'"))),
        }
    }

    /// Centered stratum indicator (+1 urban, −1 rural, 0 combined).
    pub fn indicator(self) -> f64 {
        match self {
            Stratum::All => 0.0,
            Stratum::Urban => 1.0,
            Stratum::Rural => -1.0,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Number of mixture components, M + 1.
    pub components: usize,
    #[serde(alias = "strata_enabled")]
    pub strata: bool,
    #[serde(alias = "main_effects_enabled")]
    pub main_effects: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            components: 5,
            strata: false,
            main_effects: false,
        }
    }
}

/// Design attributes of one likelihood record that enter the score decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub country: usize,
    pub year: usize,
    pub national: bool,
    pub full_age: bool,
    pub stratum: Stratum,
}

impl StudyDesign {
    /// Records that belong to a single stratum carry a study-specific stratum error.
    pub fn has_stratum_error(&self) -> bool {
        self.stratum != Stratum::All
    }
}

/// Sizes of every parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of stick-breaking scores (components − 1).
    pub m: usize,
    pub countries: usize,
    pub regions: usize,
    pub years: usize,
    pub covariates: usize,
    pub studies: usize,
    pub strata: bool,
    pub main_effects: bool,
}

impl ModelDims {
    pub fn new(hier: &HierarchyConfig, n_studies: usize, options: ModelOptions) -> Result<Self> {
        if options.components < 2 {
            return Err(Error::Config("need at least two mixture components".into()));
        }
        Ok(Self {
            m: options.components - 1,
            countries: hier.n_countries(),
            regions: hier.n_regions(),
            years: hier.n_years(),
            covariates: hier.n_covariates(),
            studies: n_studies,
            strata: options.strata,
            main_effects: options.main_effects,
        })
    }

    pub fn components(&self) -> usize {
        self.m + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataEffects {
    pub gamma_c: Vec<f64>,
    pub gamma_r: Vec<f64>,
    pub gamma_g: f64,
    pub rho_c: Vec<f64>,
    pub rho_r: Vec<f64>,
    pub rho_g: f64,
    pub c: Vec<f64>,
}

/// Effects for one stick-breaking score index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEffects {
    pub delta_c: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub delta_g: f64,
    pub phi_c: Vec<f64>,
    pub phi_r: Vec<f64>,
    pub phi_g: f64,
    pub u_c: Vec<Vec<f64>>,
    pub u_r: Vec<Vec<f64>>,
    pub u_g: Vec<f64>,
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub strata: Option<StrataEffects>,
}

/// Effects shared by every score ("sloshing" terms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainEffects {
    pub delta0_c: Vec<f64>,
    pub delta0_r: Vec<f64>,
    pub delta0_g: f64,
    pub phi0_c: Vec<f64>,
    pub phi0_r: Vec<f64>,
    pub phi0_g: f64,
    pub beta0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEffects {
    pub components: Vec<ComponentEffects>,
    pub main: Option<MainEffects>,
}

impl AlphaEffects {
    pub fn zeros(d: &ModelDims) -> Self {
        let comp = ComponentEffects {
            delta_c: vec![0.0; d.countries],
            delta_r: vec![0.0; d.regions],
            delta_g: 0.0,
            phi_c: vec![0.0; d.countries],
            phi_r: vec![0.0; d.regions],
            phi_g: 0.0,
            u_c: vec![vec![0.0; d.years]; d.countries],
            u_r: vec![vec![0.0; d.years]; d.regions],
            u_g: vec![0.0; d.years],
            beta: vec![0.0; d.covariates],
            a: vec![0.0; d.studies],
            b: vec![0.0; d.studies],
            strata: d.strata.then(|| StrataEffects {
                gamma_c: vec![0.0; d.countries],
                gamma_r: vec![0.0; d.regions],
                gamma_g: 0.0,
                rho_c: vec![0.0; d.countries],
                rho_r: vec![0.0; d.regions],
                rho_g: 0.0,
                c: vec![0.0; d.studies],
            }),
        };
        Self {
            components: vec![comp; d.m],
            main: d.main_effects.then(|| MainEffects {
                delta0_c: vec![0.0; d.countries],
                delta0_r: vec![0.0; d.regions],
                delta0_g: 0.0,
                phi0_c: vec![0.0; d.countries],
                phi0_r: vec![0.0; d.regions],
                phi0_g: 0.0,
                beta0: vec![0.0; d.covariates],
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataHyper {
    pub tau_gamma_c: f64,
    pub tau_gamma_r: f64,
    pub tau_rho_c: f64,
    pub tau_rho_r: f64,
    pub v_c: f64,
}

/// Variance parameters for one score index. `tau_*` and `v_*` are scales; `lambda_*` are
/// RW2 precisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentHyper {
    pub tau_delta_c: f64,
    pub tau_delta_r: f64,
    pub tau_phi_c: f64,
    pub tau_phi_r: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub v_n: f64,
    pub v_s: f64,
    pub v_b: f64,
    pub strata: Option<StrataHyper>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainHyper {
    pub tau_delta0_c: f64,
    pub tau_delta0_r: f64,
    pub tau_phi0_c: f64,
    pub tau_phi0_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub components: Vec<ComponentHyper>,
    pub main: Option<MainHyper>,
}

impl Hyperparams {
    /// A valid starting point: moderate scales, ordered precisions.
    pub fn initial(d: &ModelDims) -> Self {
        let comp = ComponentHyper {
            tau_delta_c: 0.5,
            tau_delta_r: 0.5,
            tau_phi_c: 0.5,
            tau_phi_r: 0.5,
            lambda_c: 20.0,
            lambda_r: 60.0,
            lambda_g: 180.0,
            v_n: 0.2,
            v_s: 0.4,
            v_b: 0.2,
            strata: d.strata.then_some(StrataHyper {
                tau_gamma_c: 0.3,
                tau_gamma_r: 0.3,
                tau_rho_c: 0.3,
                tau_rho_r: 0.3,
                v_c: 0.2,
            }),
        };
        Self {
            components: vec![comp; d.m],
            main: d.main_effects.then_some(MainHyper {
                tau_delta0_c: 0.5,
                tau_delta0_r: 0.5,
                tau_phi0_c: 0.5,
                tau_phi0_r: 0.5,
            }),
        }
    }
}

/// Full parameter state. The basis is stored raw so that constraint-violating proposals
/// are representable (and then rejected by the prior).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub thetas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub effects: AlphaEffects,
    pub hyper: Hyperparams,
}

/// Name of one scalar parameter: block label plus up to three indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamName {
    pub block: &'static str,
    pub idx: [Option<usize>; 3],
}

impl ParamName {
    const fn new(block: &'static str, idx: [Option<usize>; 3]) -> Self {
        Self { block, idx }
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.block)?;
        let parts: Vec<String> = self.idx.iter().flatten().map(ToString::to_string).collect();
        if !parts.is_empty() {
            write!(f, "[{}]", parts.join(","))?;
        }
        Ok(())
    }
}

macro_rules! visit_vec {
    ($f:expr, $name:literal, $m:expr, $v:expr) => {
        for (i, x) in $v.iter_mut().enumerate() {
            $f(ParamName::new($name, [$m, Some(i), None]), x);
        }
    };
}

macro_rules! visit_mat {
    ($f:expr, $name:literal, $m:expr, $v:expr) => {
        for (i, row) in $v.iter_mut().enumerate() {
            for (t, x) in row.iter_mut().enumerate() {
                $f(ParamName::new($name, [$m, Some(i), Some(t)]), x);
            }
        }
    };
}

impl ModelState {
    pub fn basis(&self, sigma_cap: f64) -> Result<MixtureBasis<f64>> {
        MixtureBasis::new(self.thetas.clone(), self.sigmas.clone(), sigma_cap)
    }

    /// Visits every scalar parameter in a fixed order.
    pub fn walk(&mut self, f: &mut dyn FnMut(ParamName, &mut f64)) {
        visit_vec!(f, "theta", None, self.thetas);
        visit_vec!(f, "sigma", None, self.sigmas);
        for (m, c) in self.effects.components.iter_mut().enumerate() {
            let m = Some(m);
            visit_vec!(f, "delta_c", m, c.delta_c);
            visit_vec!(f, "delta_r", m, c.delta_r);
            f(ParamName::new("delta_g", [m, None, None]), &mut c.delta_g);
            visit_vec!(f, "phi_c", m, c.phi_c);
            visit_vec!(f, "phi_r", m, c.phi_r);
            f(ParamName::new("phi_g", [m, None, None]), &mut c.phi_g);
            visit_mat!(f, "u_c", m, c.u_c);
            visit_mat!(f, "u_r", m, c.u_r);
            visit_vec!(f, "u_g", m, c.u_g);
            visit_vec!(f, "beta", m, c.beta);
            visit_vec!(f, "a", m, c.a);
            visit_vec!(f, "b", m, c.b);
            if let Some(s) = c.strata.as_mut() {
                visit_vec!(f, "gamma_c", m, s.gamma_c);
                visit_vec!(f, "gamma_r", m, s.gamma_r);
                f(ParamName::new("gamma_g", [m, None, None]), &mut s.gamma_g);
                visit_vec!(f, "rho_c", m, s.rho_c);
                visit_vec!(f, "rho_r", m, s.rho_r);
                f(ParamName::new("rho_g", [m, None, None]), &mut s.rho_g);
                visit_vec!(f, "c", m, s.c);
            }
        }
        if let Some(e) = self.effects.main.as_mut() {
            visit_vec!(f, "delta0_c", None, e.delta0_c);
            visit_vec!(f, "delta0_r", None, e.delta0_r);
            f(ParamName::new("delta0_g", [None; 3]), &mut e.delta0_g);
            visit_vec!(f, "phi0_c", None, e.phi0_c);
            visit_vec!(f, "phi0_r", None, e.phi0_r);
            f(ParamName::new("phi0_g", [None; 3]), &mut e.phi0_g);
            visit_vec!(f, "beta0", None, e.beta0);
        }
        for (m, h) in self.hyper.components.iter_mut().enumerate() {
            let m = Some(m);
            let mut one = |name: &'static str, x: &mut f64| f(ParamName::new(name, [m, None, None]), x);
            one("tau_delta_c", &mut h.tau_delta_c);
            one("tau_delta_r", &mut h.tau_delta_r);
            one("tau_phi_c", &mut h.tau_phi_c);
            one("tau_phi_r", &mut h.tau_phi_r);
            one("lambda_c", &mut h.lambda_c);
            one("lambda_r", &mut h.lambda_r);
            one("lambda_g", &mut h.lambda_g);
            one("v_n", &mut h.v_n);
            one("v_s", &mut h.v_s);
            one("v_b", &mut h.v_b);
            if let Some(s) = h.strata.as_mut() {
                one("tau_gamma_c", &mut s.tau_gamma_c);
                one("tau_gamma_r", &mut s.tau_gamma_r);
                one("tau_rho_c", &mut s.tau_rho_c);
                one("tau_rho_r", &mut s.tau_rho_r);
                one("v_c", &mut s.v_c);
            }
        }
        if let Some(h) = self.hyper.main.as_mut() {
            f(ParamName::new("tau_delta0_c", [None; 3]), &mut h.tau_delta0_c);
            f(ParamName::new("tau_delta0_r", [None; 3]), &mut h.tau_delta0_r);
            f(ParamName::new("tau_phi0_c", [None; 3]), &mut h.tau_phi0_c);
            f(ParamName::new("tau_phi0_r", [None; 3]), &mut h.tau_phi0_r);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().walk(&mut |_, x| out.push(*x));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.clone().walk(&mut |n, _| out.push(n.to_string()));
        out
    }

    /// Overwrites every parameter from a vector produced by [`ModelState::flatten`] on a
    /// state of the same shape.
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        let mut i = 0;
        let mut overflow = false;
        self.walk(&mut |_, x| {
            if let Some(&v) = values.get(i) {
                *x = v;
            } else {
                overflow = true;
            }
            i += 1;
        });
        if overflow || i != values.len() {
            return Err(Error::Format(format!(
                "parameter vector has {} entries, state expects {i}",
                values.len()
            )));
        }
        Ok(())
    }

    pub fn zeros(d: &ModelDims) -> Self {
        Self {
            thetas: (0..d.components()).map(|k| k as f64).collect(),
            sigmas: vec![1.0; d.components()],
            effects: AlphaEffects::zeros(d),
            hyper: Hyperparams::initial(d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            m: 2,
            countries: 3,
            regions: 2,
            years: 4,
            covariates: 2,
            studies: 5,
            strata: true,
            main_effects: true,
        }
    }

    #[test]
    fn flatten_round_trip_and_names_align() {
        let mut s = ModelState::zeros(&dims());
        let mut k = 0.0;
        s.walk(&mut |_, x| {
            *x = k;
            k += 1.0;
        });
        let flat = s.flatten();
        let names = s.param_names();
        assert_eq!(flat.len(), names.len());
        assert_eq!(names[0], "theta[0]");
        assert!(names.contains(&"u_c[1,2,3]".to_string()));
        assert!(names.contains(&"tau_delta0_r".to_string()));
        let mut other = ModelState::zeros(&dims());
        other.unflatten(&flat).unwrap();
        assert_eq!(other, s);
        assert!(other.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn stratum_parsing() {
        assert_eq!(Stratum::parse("combined").unwrap(), Stratum::All);
        assert_eq!(Stratum::parse("urban").unwrap().indicator(), 1.0);
        assert!(Stratum::parse("suburban").is_err());
    }
}
