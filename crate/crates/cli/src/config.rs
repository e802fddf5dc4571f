use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::sha256_bytes;

/// Reads a JSON config, or returns `T::default()` when no path is given.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => load(p),
        None => Ok(T::default()),
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Digest of the effective (post-override) config of a stage.
pub fn config_hash<T: Serialize>(stage: &str, config: &T) -> Result<String> {
    let body = serde_json::to_string(config)?;
    Ok(sha256_bytes(format!("{stage}\n{body}").as_bytes()))
}

/// Top-level pipeline file: the master seed plus one config file per stage,
/// paths relative to the pipeline file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub pretrain: PathBuf,
    pub cluster: PathBuf,
    pub ctr: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let cfg: Self = load(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((cfg, base))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub variant: String,
    pub image_mode: String,
    /// Falls back to the pipeline's master seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    /// Pipeline file, relative to the grid file.
    pub pipeline: PathBuf,
    pub cells: Vec<GridCell>,
    /// Index of the cell every delta is taken against.
    #[serde(default)]
    pub baseline: usize,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(CliError::Config("grid has no cells".into()));
        }
        if self.baseline >= self.cells.len() {
            return Err(CliError::Config(format!(
                "baseline index {} is outside the {} cells",
                self.baseline,
                self.cells.len()
            )));
        }
        Ok(())
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
