//! Input tables, draw files, checkpoints, run configuration, and run manifests.

mod config;
mod dataset;
mod draws;
mod manifest;

pub use config::{CltConfig, DataConfig, PredictConfig, PriorOverrides, RunConfig};
pub use dataset::{
    fill_ess, load_dataset, save_dataset, sha256_hex, urban_shares, DatasetBundle, DatasetPaths, LoadOptions,
    PopulationKey,
};
pub use draws::{
    load_draws, read_checkpoint, read_functional_column, save_draws, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, DRAWS_MAGIC, DRAWS_VERSION,
};
pub use manifest::{timestamp, ChainOutcome, RunManifest};
