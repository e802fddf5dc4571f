//! How pre-trained embeddings enter the CTR model. Each mode is a strategy
//! behind [`ImageFeatureMode`], looked up by name in an [`ImageModeRegistry`].

use std::collections::BTreeMap;
use std::sync::Arc;

use diffcore::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::CtrConfig;
use crate::error::{CoreError, Result};
use crate::nn::{uniform, ParamSet};
use crate::quantize::simscore_features;

/// Artifacts a mode may read: the exported embedding table and the cluster
/// map, both indexed by item id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResources {
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub cluster_ids: Option<Vec<usize>>,
    pub num_clusters: usize,
}

impl ImageResources {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_embeddings(mut self, table: Vec<Vec<f64>>) -> Self {
        self.embeddings = Some(table);
        self
    }

    pub fn with_clusters(mut self, ids: Vec<usize>, k: usize) -> Self {
        self.cluster_ids = Some(ids);
        self.num_clusters = k;
        self
    }

    fn embeddings(&self, mode: &str, num_items: usize) -> Result<&[Vec<f64>]> {
        let t = self.embeddings.as_deref().ok_or_else(|| {
            CoreError::MissingResource(format!("image mode {mode} needs the embedding table"))
        })?;
        if t.len() != num_items {
            return Err(CoreError::Data(format!(
                "embedding table has {} rows for {num_items} items",
                t.len()
            )));
        }
        Ok(t)
    }
}

/// A pipeline artifact an image mode reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageArtifact {
    Embeddings,
    ClusterMap,
}

pub trait ImageFeatureMode: Send + Sync {
    fn name(&self) -> &str;

    fn requires(&self) -> &'static [ImageArtifact] {
        &[]
    }

    /// Fails when `res` lacks what this mode reads.
    fn validate(&self, _res: &ImageResources, _num_items: usize) -> Result<()> {
        Ok(())
    }

    /// Width appended to every item vector.
    fn item_dim(&self, _config: &CtrConfig, _res: &ImageResources) -> usize {
        0
    }

    /// Width appended at the fusion layer.
    fn fusion_dim(&self, _l_click: usize) -> usize {
        0
    }

    /// Adds the mode's own parameters and returns their ids.
    fn init_params(
        &self,
        _params: &mut ParamSet,
        _config: &CtrConfig,
        _res: &ImageResources,
        _rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        Vec::new()
    }

    /// Image part of the item vectors of `items`, `[items.len() × item_dim]`.
    fn item_part(
        &self,
        _tape: &mut Tape,
        _vars: &[Var],
        _own: &[usize],
        _res: &ImageResources,
        _items: &[usize],
    ) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Extra fusion inputs for one `(target, history)` pair.
    fn fusion_part(
        &self,
        _res: &ImageResources,
        _target: usize,
        _history: &[usize],
        _mask: &[bool],
    ) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

/// Item-id embedding only.
pub struct NoImage;

impl ImageFeatureMode for NoImage {
    fn name(&self) -> &str {
        "none"
    }
}

/// The raw embedding is appended to the item vector.
pub struct VectorMode;

impl ImageFeatureMode for VectorMode {
    fn name(&self) -> &str {
        "vector"
    }

    fn requires(&self) -> &'static [ImageArtifact] {
        &[ImageArtifact::Embeddings]
    }

    fn validate(&self, res: &ImageResources, num_items: usize) -> Result<()> {
        res.embeddings(self.name(), num_items).map(|_| ())
    }

    fn item_dim(&self, _config: &CtrConfig, res: &ImageResources) -> usize {
        res.embeddings
            .as_ref()
            .and_then(|t| t.first())
            .map_or(0, Vec::len)
    }

    fn item_part(
        &self,
        tape: &mut Tape,
        _vars: &[Var],
        _own: &[usize],
        res: &ImageResources,
        items: &[usize],
    ) -> Result<Option<Var>> {
        let table = res.embeddings(self.name(), res.embeddings.as_ref().map_or(0, Vec::len))?;
        let rows: Vec<Vec<f64>> = items.iter().map(|&i| table[i].clone()).collect();
        Ok(Some(tape.constant(Tensor::from_rows(&rows)?)))
    }
}

/// Cosine scores between the target and each history item are appended at
/// the fusion layer. Scores are sorted in descending order with masked slots
/// (zeros) last, which keeps the model blind to history order.
pub struct SimScoreMode;

impl ImageFeatureMode for SimScoreMode {
    fn name(&self) -> &str {
        "simscore"
    }

    fn requires(&self) -> &'static [ImageArtifact] {
        &[ImageArtifact::Embeddings]
    }

    fn validate(&self, res: &ImageResources, num_items: usize) -> Result<()> {
        res.embeddings(self.name(), num_items).map(|_| ())
    }

    fn fusion_dim(&self, l_click: usize) -> usize {
        l_click
    }

    fn fusion_part(
        &self,
        res: &ImageResources,
        target: usize,
        history: &[usize],
        mask: &[bool],
    ) -> Result<Vec<f64>> {
        let table = res.embeddings(self.name(), res.embeddings.as_ref().map_or(0, Vec::len))?;
        let hist: Vec<Vec<f64>> = history.iter().map(|&i| table[i].clone()).collect();
        let scores = simscore_features(&table[target], &hist, mask)?;
        let mut valid: Vec<f64> = scores
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&s, _)| s)
            .collect();
        valid.sort_by(|a, b| b.total_cmp(a));
        valid.resize(history.len(), 0.0);
        Ok(valid)
    }
}

/// A trainable embedding of the item's cluster id is appended to the item
/// vector.
pub struct ClusterIdMode;

impl ImageFeatureMode for ClusterIdMode {
    fn name(&self) -> &str {
        "clusterid"
    }

    fn requires(&self) -> &'static [ImageArtifact] {
        &[ImageArtifact::ClusterMap]
    }

    fn validate(&self, res: &ImageResources, num_items: usize) -> Result<()> {
        let ids = res.cluster_ids.as_ref().ok_or_else(|| {
            CoreError::MissingResource("image mode clusterid needs the cluster map".into())
        })?;
        if ids.len() != num_items {
            return Err(CoreError::Data(format!(
                "cluster map has {} rows for {num_items} items",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&c| c >= res.num_clusters) {
            return Err(CoreError::Data(format!(
                "cluster id {bad} out of range for k={}",
                res.num_clusters
            )));
        }
        Ok(())
    }

    fn item_dim(&self, config: &CtrConfig, _res: &ImageResources) -> usize {
        config.d_cid
    }

    fn init_params(
        &self,
        params: &mut ParamSet,
        config: &CtrConfig,
        res: &ImageResources,
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        let t = uniform(rng, &[res.num_clusters, config.d_cid], config.init_scale);
        vec![params.push("image.cluster_embedding", t)]
    }

    fn item_part(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        own: &[usize],
        res: &ImageResources,
        items: &[usize],
    ) -> Result<Option<Var>> {
        let map = res
            .cluster_ids
            .as_ref()
            .ok_or_else(|| CoreError::MissingResource("cluster map".into()))?;
        let ids: Vec<usize> = items.iter().map(|&i| map[i]).collect();
        Ok(Some(tape.gather_rows(vars[own[0]], &ids)?))
    }
}

#[derive(Clone, Default)]
pub struct ImageModeRegistry {
    entries: BTreeMap<String, Arc<dyn ImageFeatureMode>>,
    order: Vec<String>,
}

impl ImageModeRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(NoImage));
        r.register(Arc::new(VectorMode));
        r.register(Arc::new(SimScoreMode));
        r.register(Arc::new(ClusterIdMode));
        r
    }

    pub fn register(&mut self, mode: Arc<dyn ImageFeatureMode>) {
        let name = mode.name().to_string();
        if self.entries.insert(name.clone(), mode).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ImageFeatureMode>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            CoreError::Config(format!(
                "unknown image mode {name:?}; known: {}",
                self.order.join(", ")
            ))
        })
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }
}
