//! Checkpoint file: JSON document whose tensor payloads are base64-encoded
//! little-endian `f64` bytes, so a save/load round trip is bit-exact.

use std::path::Path;

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::PretrainConfig;
use crate::encoder::EmbeddingModel;
use crate::error::{CoreError, Result};
use crate::nn::{decode, encode, EncodedTensor};

pub const CHECKPOINT_FORMAT: &str = "courier-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PretrainConfig,
    pub model: EmbeddingModel,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs. Together with `config.seed` this fixes every random
    /// stream a resumed run draws from.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: PretrainConfig,
    feature_dim: usize,
    step: u64,
    epoch: usize,
    params: Vec<EncodedTensor>,
    adam: AdamFile,
}

#[derive(Serialize, Deserialize)]
struct AdamFile {
    config: AdamConfig,
    step: u64,
    m: Vec<EncodedTensor>,
    v: Vec<EncodedTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let names = self.model.params.names();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            feature_dim: self.model.feature_dim(),
            step: self.step,
            epoch: self.epoch,
            params: self.model.params.encode_all(),
            adam: AdamFile {
                config: self.adam.config,
                step: self.adam.step,
                m: names.iter().zip(&self.adam.m).map(|(n, t)| encode(n, t)).collect(),
                v: names.iter().zip(&self.adam.v).map(|(n, t)| encode(n, t)).collect(),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(CoreError::Data(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let mut model = EmbeddingModel::new(file.feature_dim, &file.config.encoder, 0)?;
        model.params.load_encoded(&file.params)?;
        let load = |list: &[EncodedTensor]| -> Result<Vec<Tensor>> {
            if list.len() != model.params.len() {
                return Err(CoreError::Data("optimizer state does not match parameters".into()));
            }
            list.iter().map(decode).collect()
        };
        let adam = AdamState {
            config: file.adam.config,
            m: load(&file.adam.m)?,
            v: load(&file.adam.v)?,
            step: file.adam.step,
        };
        Ok(Self {
            config: file.config,
            model,
            adam,
            step: file.step,
            epoch: file.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
