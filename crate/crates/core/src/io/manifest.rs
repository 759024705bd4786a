use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dataset::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub chain: usize,
    pub n_draws: usize,
    /// `ok`, or the failure message.
    pub status: String,
}

/// Record of one command invocation. Written once; an existing manifest is never replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub software_version: String,
    pub config_sha256: String,
    pub dataset_sha256: Option<String>,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub chains: Vec<ChainOutcome>,
    /// SHA-256 of each output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

pub fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config_sha256: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            dataset_sha256: None,
            seed,
            started: timestamp(),
            finished: String::new(),
            chains: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records the digest of an output file.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
        self.outputs
            .insert(name.to_string_lossy().into_owned(), sha256_hex(&std::fs::read(path)?));
        Ok(())
    }

    pub fn path_in(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("manifest-{command}.json"))
    }

    /// Stamps the finish time and writes `manifest-<command>.json` into `dir`; fails if
    /// that file already exists.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = timestamp();
        let path = Self::path_in(dir, &self.command);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!(
                        "{} already exists; manifests are not overwritten",
                        path.display()
                    ))
                } else {
                    e.into()
                }
            })?;
        f.write_all(&serde_json::to_vec_pretty(&self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
