//! CTR ranker that consumes pre-trained item embeddings, and its metrics.
//!
//! Each page item is scored from three parts: its item vector (id embedding
//! plus the image part chosen by the [`ImageFeatureMode`]), a user vector
//! built by target attention over the click history, and, for modes that
//! want it, per-pair fusion features. The concatenation goes through a
//! five-layer MLP to one logit.

mod metrics;
mod modes;

use std::sync::Arc;

use diffcore::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use metrics::{auc, gauc, grouped_ndcg, metrics_report, ndcg_at_k, GroupedMetric, MetricsReport};
pub use modes::{
    ClusterIdMode, ImageArtifact, ImageFeatureMode, ImageModeRegistry, ImageResources, NoImage,
    SimScoreMode,
    VectorMode,
};

use crate::error::{CoreError, Result};
use crate::nn::{decode, encode, uniform, EncodedTensor, Mlp, ParamSet};
use crate::seed;
use crate::synth::Session;
use crate::trainer::{adam_step, AdamConfig, AdamState};

/// Linear layers in the scoring MLP.
pub const MLP_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtrConfig {
    pub seed: u64,
    pub image_mode: String,
    /// Width of the item-id embedding.
    pub d_id: usize,
    /// Width of the cluster-id embedding.
    pub d_cid: usize,
    pub user_dim: usize,
    /// Hidden widths of the scoring MLP (`MLP_LAYERS − 1` entries).
    pub mlp_hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Sessions per optimizer step.
    pub batch_sessions: usize,
    /// Half-width of the uniform init of embedding tables.
    pub init_scale: f64,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_mode: "none".into(),
            d_id: 16,
            d_cid: 16,
            user_dim: 16,
            mlp_hidden: vec![64, 32, 16, 8],
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            batch_sessions: 64,
            init_scale: 0.05,
        }
    }
}

impl CtrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("ctr: {m}")));
        if self.mlp_hidden.len() != MLP_LAYERS - 1 || self.mlp_hidden.contains(&0) {
            return bad(format!(
                "mlp_hidden needs {} positive widths, got {:?}",
                MLP_LAYERS - 1,
                self.mlp_hidden
            ));
        }
        if self.d_id == 0 || self.d_cid == 0 || self.user_dim == 0 {
            return bad("embedding widths must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || self.batch_sessions == 0 {
            return bad("lr > 0, weight_decay >= 0 and batch_sessions >= 1 required".into());
        }
        Ok(())
    }
}

/// One scored page slot: session index within the batch, item, label.
struct Example {
    group: usize,
    item: usize,
    label: u8,
}

#[derive(Clone)]
pub struct CtrModel {
    pub config: CtrConfig,
    pub params: ParamSet,
    pub resources: ImageResources,
    mode: Arc<dyn ImageFeatureMode>,
    num_items: usize,
    l_click: usize,
    id_table: usize,
    mode_params: Vec<usize>,
    user: Mlp,
    mlp: Mlp,
}

impl std::fmt::Debug for CtrModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CtrModel")
            .field("mode", &self.mode.name())
            .field("num_items", &self.num_items)
            .field("l_click", &self.l_click)
            .field("params", &self.params.names())
            .finish()
    }
}

impl CtrModel {
    pub fn new(
        config: &CtrConfig,
        num_items: usize,
        l_click: usize,
        resources: ImageResources,
    ) -> Result<Self> {
        Self::with_registry(&ImageModeRegistry::builtin(), config, num_items, l_click, resources)
    }

    pub fn with_registry(
        registry: &ImageModeRegistry,
        config: &CtrConfig,
        num_items: usize,
        l_click: usize,
        resources: ImageResources,
    ) -> Result<Self> {
        config.validate()?;
        if num_items == 0 || l_click == 0 {
            return Err(CoreError::Config("ctr model needs items and a history slot".into()));
        }
        let mode = registry.get(&config.image_mode)?;
        mode.validate(&resources, num_items)?;
        let mut rng = seed::stream(config.seed, "ctr.init", 0);
        let mut params = ParamSet::new();
        let id_table = params.push(
            "item.id_embedding",
            uniform(&mut rng, &[num_items, config.d_id], config.init_scale),
        );
        let mode_params = mode.init_params(&mut params, config, &resources, &mut rng);
        let item_dim = config.d_id + mode.item_dim(config, &resources);
        let user = Mlp::new(&mut params, "user", &[2 * item_dim, config.user_dim], &mut rng);
        let mut dims = vec![item_dim + config.user_dim + mode.fusion_dim(l_click)];
        dims.extend(&config.mlp_hidden);
        dims.push(1);
        let mlp = Mlp::new(&mut params, "mlp", &dims, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            resources,
            mode,
            num_items,
            l_click,
            id_table,
            mode_params,
            user,
            mlp,
        })
    }

    pub fn mode_name(&self) -> &str {
        self.mode.name()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn l_click(&self) -> usize {
        self.l_click
    }

    /// Width of an item vector.
    pub fn item_dim(&self) -> usize {
        self.config.d_id + self.mode.item_dim(&self.config, &self.resources)
    }

    fn item_vectors(&self, tape: &mut Tape, vars: &[Var], items: &[usize]) -> Result<Var> {
        let ids = tape.gather_rows(vars[self.id_table], items)?;
        match self
            .mode
            .item_part(tape, vars, &self.mode_params, &self.resources, items)?
        {
            Some(img) => Ok(tape.concat(&[ids, img], 1)?),
            None => Ok(ids),
        }
    }

    /// Item vector of one item, outside any training tape.
    pub fn item_vector(&self, item: usize) -> Result<Vec<f64>> {
        self.check_item(item, 0)?;
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let v = self.item_vectors(&mut tape, &vars, &[item])?;
        Ok(tape.value(v).data().to_vec())
    }

    fn check_item(&self, item: usize, session: usize) -> Result<()> {
        if item >= self.num_items {
            return Err(CoreError::Data(format!(
                "session {session} references unknown item {item}"
            )));
        }
        Ok(())
    }

    /// Logits `[n × 1]` for every unmasked page slot of `sessions`.
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sessions: &[&Session],
    ) -> Result<(Var, Vec<Example>)> {
        let g = sessions.len();
        let l = self.l_click;
        let mut examples = Vec::new();
        let mut hist_ids = Vec::with_capacity(g * l);
        let mut hist_mask = Vec::with_capacity(g * l);
        for (gi, s) in sessions.iter().enumerate() {
            if s.click_history.len() != l {
                return Err(CoreError::Data(format!(
                    "session {} has {} history slots, model expects {l}",
                    s.session_id,
                    s.click_history.len()
                )));
            }
            for (k, &it) in s.click_history.iter().enumerate() {
                let m = s.click_mask[k];
                if m {
                    self.check_item(it, s.session_id)?;
                }
                hist_ids.push(if m { it } else { 0 });
                hist_mask.push(m);
            }
            for (item, label) in s.valid_pv() {
                self.check_item(item, s.session_id)?;
                examples.push(Example {
                    group: gi,
                    item,
                    label,
                });
            }
        }
        if examples.is_empty() {
            return Err(CoreError::Data("no page items to score".into()));
        }
        let n = examples.len();
        let d = self.item_dim();
        let targets: Vec<usize> = examples.iter().map(|e| e.item).collect();
        let t = self.item_vectors(tape, vars, &targets)?;
        let h_flat = self.item_vectors(tape, vars, &hist_ids)?;
        let h = tape.reshape(h_flat, &[g, l, d])?;

        let has_hist: Vec<bool> = (0..g).map(|gi| hist_mask[gi * l..(gi + 1) * l].iter().any(|&m| m)).collect();
        let rows: Vec<usize> = (0..n).filter(|&i| has_hist[examples[i].group]).collect();
        if rows.len() < n {
            log::warn!("{} page items have an empty click history; using a zero user vector", n - rows.len());
        }
        // Masked mean of each session's history, one row per example.
        let mut pool = Tensor::zeros(&[n, g * l]);
        for (i, e) in examples.iter().enumerate() {
            let cnt = hist_mask[e.group * l..(e.group + 1) * l].iter().filter(|&&m| m).count();
            for k in 0..l {
                if hist_mask[e.group * l + k] {
                    pool.data_mut()[i * g * l + e.group * l + k] = 1.0 / cnt as f64;
                }
            }
        }
        let pool = tape.constant(pool);
        let mean_hist = tape.matmul(pool, h_flat)?;
        let att_full = if rows.is_empty() {
            tape.constant(Tensor::zeros(&[n, d]))
        } else {
            let q = tape.gather_rows(t, &rows)?;
            let groups: Vec<usize> = rows.iter().map(|&i| examples[i].group).collect();
            let att = tape.grouped_attention(q, h, h, &groups, &hist_mask)?;
            if rows.len() == n {
                att.out
            } else {
                let zero = tape.constant(Tensor::zeros(&[1, d]));
                let padded = tape.concat(&[att.out, zero], 0)?;
                let mut pos = vec![rows.len(); n];
                for (r, &i) in rows.iter().enumerate() {
                    pos[i] = r;
                }
                tape.gather_rows(padded, &pos)?
            }
        };
        let user_in = tape.concat(&[att_full, mean_hist], 1)?;
        let user_raw = self.user.forward(tape, vars, user_in)?;
        // Keep the user vector exactly zero when there is no history.
        let user = if rows.len() == n {
            user_raw
        } else {
            let mut m = Tensor::zeros(&[n, self.config.user_dim]);
            for &i in &rows {
                for c in 0..self.config.user_dim {
                    m.data_mut()[i * self.config.user_dim + c] = 1.0;
                }
            }
            let m = tape.constant(m);
            tape.mul(user_raw, m)?
        };
        let mut parts = vec![t, user];
        let fd = self.mode.fusion_dim(l);
        if fd > 0 {
            let mut data = Vec::with_capacity(n * fd);
            for e in &examples {
                let gi = e.group;
                let f = self.mode.fusion_part(
                    &self.resources,
                    e.item,
                    &hist_ids[gi * l..(gi + 1) * l],
                    &hist_mask[gi * l..(gi + 1) * l],
                )?;
                data.extend(f);
            }
            parts.push(tape.constant(Tensor::new(vec![n, fd], data)?));
        }
        let fused = tape.concat(&parts, 1)?;
        let logits = self.mlp.forward(tape, vars, fused)?;
        Ok((logits, examples))
    }

    /// Click probabilities for the unmasked page slots of each session, in
    /// page order.
    pub fn predict(&self, sessions: &[Session]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(sessions.len());
        for chunk in sessions.chunks(256) {
            let refs: Vec<&Session> = chunk.iter().collect();
            let mut tape = Tape::new();
            let vars = self.params.register_frozen(&mut tape);
            let (logits, examples) = self.forward(&mut tape, &vars, &refs)?;
            let v = tape.value(logits).data();
            let mut per = vec![Vec::new(); chunk.len()];
            for (e, &z) in examples.iter().zip(v) {
                per[e.group].push(diffcore::sigmoid(z));
            }
            out.extend(per);
        }
        Ok(out)
    }

    /// Mean binary cross entropy over the unmasked page slots of `sessions`.
    pub fn loss(&self, sessions: &[Session]) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in sessions.chunks(256) {
            let refs: Vec<&Session> = chunk.iter().collect();
            let mut tape = Tape::new();
            let vars = self.params.register_frozen(&mut tape);
            let (logits, examples) = self.forward(&mut tape, &vars, &refs)?;
            let y: Vec<f64> = examples.iter().map(|e| f64::from(e.label)).collect();
            let l = tape.bce_with_logits(logits, &y)?;
            total += tape.value(l).item() * y.len() as f64;
            count += y.len();
        }
        if count == 0 {
            return Err(CoreError::Data("no page items to score".into()));
        }
        Ok(total / count as f64)
    }

    /// One Adam step on `sessions`; returns the batch loss before the step.
    fn step(&mut self, sessions: &[&Session], adam: &mut AdamState) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let (logits, examples) = self.forward(&mut tape, &vars, sessions)?;
        let y: Vec<f64> = examples.iter().map(|e| f64::from(e.label)).collect();
        let loss = tape.bce_with_logits(logits, &y)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(CoreError::Numeric {
                step: adam.step,
                batch: 0,
                detail: "non-finite CTR loss".into(),
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(CoreError::Numeric {
                step: adam.step,
                batch: 0,
                detail: format!("non-finite gradient for {}", self.params.names()[i]),
            });
        }
        adam_step(self.params.tensors_mut(), &grads, adam)?;
        Ok(value)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CtrFile {
            format: CTR_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            num_items: self.num_items,
            l_click: self.l_click,
            num_clusters: self.resources.num_clusters,
            cluster_ids: self.resources.cluster_ids.clone(),
            embeddings: match &self.resources.embeddings {
                Some(t) => Some(encode("embeddings", &Tensor::from_rows(t)?)),
                None => None,
            },
            params: self.params.encode_all(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CtrFile = serde_json::from_str(text)?;
        if file.format != CTR_FORMAT || file.version != 1 {
            return Err(CoreError::Data(format!("unsupported model file {} v{}", file.format, file.version)));
        }
        let mut resources = ImageResources {
            embeddings: None,
            cluster_ids: file.cluster_ids,
            num_clusters: file.num_clusters,
        };
        if let Some(e) = &file.embeddings {
            let t = decode(e)?;
            resources.embeddings = Some((0..t.rows()).map(|i| t.row(i).to_vec()).collect());
        }
        let mut m = Self::new(&file.config, file.num_items, file.l_click, resources)?;
        m.params.load_encoded(&file.params)?;
        Ok(m)
    }
}

const CTR_FORMAT: &str = "courier-ctr";

#[derive(Serialize, Deserialize)]
struct CtrFile {
    format: String,
    version: u32,
    config: CtrConfig,
    num_items: usize,
    l_click: usize,
    num_clusters: usize,
    cluster_ids: Option<Vec<usize>>,
    embeddings: Option<EncodedTensor>,
    params: Vec<EncodedTensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CtrTrainLog {
    pub mode: String,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` for `model.config.epochs` epochs of shuffled session
/// batches with per-slot binary cross entropy.
pub fn train_ctr(model: &mut CtrModel, train: &[Session]) -> Result<CtrTrainLog> {
    if train.is_empty() {
        return Err(CoreError::Data("no training sessions".into()));
    }
    let cfg = model.config.clone();
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr, cfg.weight_decay), model.params.tensors());
    let mut log = CtrTrainLog {
        mode: model.mode_name().to_string(),
        epoch_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::stream(cfg.seed, "ctr.shuffle", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_sessions).enumerate() {
            let batch: Vec<&Session> = idx.iter().map(|&i| &train[i]).collect();
            total += model.step(&batch, &mut adam).map_err(|e| match e {
                CoreError::Numeric { step, detail, .. } => CoreError::Numeric {
                    step,
                    batch: b,
                    detail: format!("epoch {epoch}: {detail}"),
                },
                other => other,
            })?;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
        log::info!("ctr epoch {} loss {:.5}", epoch + 1, total / batches as f64);
    }
    Ok(log)
}

/// Scores `sessions` and computes the metric report.
pub fn evaluate_report(
    model: &CtrModel,
    sessions: &[Session],
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let scores = model.predict(sessions)?;
    let grouped: Vec<(Vec<f64>, Vec<u8>)> = scores
        .into_iter()
        .zip(sessions)
        .map(|(s, sess)| (s, sess.valid_pv().map(|(_, y)| y).collect()))
        .collect();
    metrics_report(&grouped, model.mode_name(), seed, config_hash)
}
