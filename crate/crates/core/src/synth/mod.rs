//! Synthetic catalog and click-stream generator built on a hidden
//! characteristic model, so every label has a known cause.

mod catalog;
mod io;
mod sessions;

pub use catalog::{generate_catalog, CatalogConfig, CharacteristicSpace, Item};
pub use io::{
    read_catalog, read_jsonl, read_sessions, write_catalog, write_jsonl, write_sessions,
    CATALOG_FILE, SPACE_FILE, TEST_FILE, TRAIN_FILE,
};
pub use sessions::{
    click_probability, downsample_negatives, generate_sessions, history_chars, overlap_fraction,
    page_sort_trim, Session, SessionConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Everything `gen-data` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
    /// Probability of keeping each negative page item.
    pub keep_rate: f64,
    #[serde(default)]
    pub catalog: CatalogConfig,
    #[serde(default)]
    pub sessions: SessionConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_train: 10_000,
            num_test: 2_000,
            keep_rate: 0.2,
            catalog: CatalogConfig::default(),
            sessions: SessionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub space: CharacteristicSpace,
    pub catalog: Vec<Item>,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
}

impl DatasetSplit {
    pub fn l_pv(&self) -> usize {
        self.train.first().map_or(0, |s| s.pv_items.len())
    }

    pub fn l_click(&self) -> usize {
        self.train.first().map_or(0, |s| s.click_history.len())
    }

    /// Rejects sessions that reference unknown items or have ragged lists.
    pub fn check(&self) -> Result<()> {
        for s in self.train.iter().chain(&self.test) {
            s.check()?;
            let n = self.catalog.len();
            if s.click_history.iter().chain(&s.pv_items).any(|&i| i >= n) {
                return Err(CoreError::Data(format!(
                    "session {} references an item outside the {}-item catalog",
                    s.session_id, n
                )));
            }
        }
        Ok(())
    }
}

/// Catalog, then train sessions, then test sessions (later in simulated
/// time), each down-sampled and trimmed to `l_pv` page slots.
pub fn generate_dataset(config: &DataConfig) -> Result<DatasetSplit> {
    let seed = config.seed;
    let (space, catalog) = generate_catalog(&config.catalog, seed)?;
    let raw = generate_sessions(
        &space,
        &catalog,
        &config.sessions,
        seed,
        0,
        config.num_train + config.num_test,
    )?;
    let l_pv = config.sessions.l_pv;
    let finish = |s: &[Session]| -> Result<Vec<Session>> {
        Ok(downsample_negatives(s, config.keep_rate, seed)?
            .iter()
            .map(|s| page_sort_trim(s, l_pv))
            .collect())
    };
    let train = finish(&raw[..config.num_train])?;
    let test = finish(&raw[config.num_train..])?;
    Ok(DatasetSplit {
        space,
        catalog,
        train,
        test,
    })
}
