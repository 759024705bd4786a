use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{CvConfig, SyntheticSpec, Target};
use crate::model::{ModelOptions, PriorBounds};
use crate::sampler::SamplerConfig;

use super::dataset::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the input tables; relative paths resolve against the config file.
    pub dir: PathBuf,
    /// Prevalences are given in percent.
    pub percent: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            percent: false,
        }
    }
}

/// Prior bounds to override; unset fields keep the data-derived or default value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOverrides {
    pub theta_lo: Option<f64>,
    pub theta_hi: Option<f64>,
    pub sigma_cap: Option<f64>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
    pub log_lambda_min: Option<f64>,
    pub log_lambda_max: Option<f64>,
}

impl PriorOverrides {
    pub fn apply(&self, mut b: PriorBounds) -> PriorBounds {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut b.theta_lo, self.theta_lo);
        set(&mut b.theta_hi, self.theta_hi);
        set(&mut b.sigma_cap, self.sigma_cap);
        set(&mut b.scale_min, self.scale_min);
        set(&mut b.scale_max, self.scale_max);
        set(&mut b.log_lambda_min, self.log_lambda_min);
        set(&mut b.log_lambda_max, self.log_lambda_max);
        b
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub targets: Vec<Target>,
    /// Also export posterior densities of the targets on the fixed grid.
    pub density_grid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltConfig {
    pub n: usize,
    pub reps: usize,
    /// Microdata study whose values seed the check; a synthetic unimodal density when absent.
    pub study: Option<String>,
}

impl Default for CltConfig {
    fn default() -> Self {
        Self {
            n: 199,
            reps: 1000,
            study: None,
        }
    }
}

/// Whole run configuration, read from one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelOptions,
    pub priors: PriorOverrides,
    pub sampler: SamplerConfig,
    /// Functionals with R̂ at or above this value count as not converged.
    pub rhat_threshold: f64,
    pub cv: CvConfig,
    pub simulate: SyntheticSpec,
    pub predict: PredictConfig,
    pub clt: CltConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelOptions::default(),
            priors: PriorOverrides::default(),
            sampler: SamplerConfig::default(),
            rhat_threshold: 1.1,
            cv: CvConfig::default(),
            simulate: SyntheticSpec::default(),
            predict: PredictConfig::default(),
            clt: CltConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config. Sampler sections without a phase schedule get the
    /// default schedule for their burn-in.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        let doc: toml::Table = text.parse()?;
        let has_schedule = |section: Option<&toml::Value>| section.and_then(|v| v.get("phase_schedule")).is_some();
        if !has_schedule(doc.get("sampler")) {
            cfg.sampler.phase_schedule = SamplerConfig::default_phases(cfg.sampler.burnin);
        }
        if let Some(s) = cfg.cv.sampler.as_mut() {
            if !has_schedule(doc.get("cv").and_then(|c| c.get("sampler"))) {
                s.phase_schedule = SamplerConfig::default_phases(s.burnin);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if let Some(s) = &self.cv.sampler {
            s.validate()?;
        }
        if self.model.components < 2 {
            return Err(Error::Config("at least two mixture components are required".into()));
        }
        if !(self.rhat_threshold > 1.0) {
            return Err(Error::Config(format!(
                "rhat_threshold {} must exceed 1",
                self.rhat_threshold
            )));
        }
        Ok(())
    }

    /// Reads and validates a config file; returns it with the SHA-256 of its bytes. The
    /// data directory is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(text)?;
        if cfg.data.dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.data.dir = parent.join(&cfg.data.dir);
            }
        }
        Ok((cfg, sha256_hex(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_and_aliases() {
        let cfg = RunConfig::from_toml(
            r#"
            rhat_threshold = 1.05
            [model]
            components = 4
            strata_enabled = true
            [sampler]
            n_iter = 400
            burnin = 200
            [sampler.adaptation]
            batch_len = 25
            [priors]
            log_lambda_max = 10.0
            [[predict.targets]]
            country = "C01"
            year = 2003
            stratum = "urban"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.components, 4);
        assert!(cfg.model.strata && !cfg.model.main_effects);
        assert_eq!(
            (cfg.sampler.n_iter, cfg.sampler.burnin, cfg.sampler.thin),
            (400, 200, 30)
        );
        assert_eq!(cfg.sampler.adaptation.batch_len, 25);
        assert_eq!(cfg.sampler.phase_schedule, SamplerConfig::default_phases(200));
        assert_eq!(cfg.priors.apply(PriorBounds::default()).log_lambda_max, 10.0);
        assert_eq!(cfg.predict.targets[0].stratum, crate::model::Stratum::Urban);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml("[model]\ncomponentz = 3").is_err());
        assert!(matches!(
            RunConfig::from_toml("[sampler]\nn_iter = 10\nburnin = 20"),
            Err(Error::Config(_))
        ));
    }
}
