//! Resolved run configuration: built-in defaults, then a TOML file, then
//! command-line flags. Every command writes the result next to its outputs as
//! `run_config.toml`, which can be fed back through `--config`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bysgnn::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Command that produced a snapshot; ignored when loading.
    pub command: Option<String>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Precomputed sentence embeddings keyed by node label.
    pub embeddings: Option<PathBuf>,
    /// Precomputed `N × N` distance matrix in meters.
    pub distances: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Ablation runs: variants beside the full model, and seeds.
    pub variants: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    /// Graph inspection time.
    pub timestamp: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults, or the file at `path` when given.
    pub fn base(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising run configuration")
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
