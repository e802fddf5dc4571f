//! Pre-training objectives.
//!
//! Every objective implements [`PretrainObjective`] and is looked up by name
//! in an [`ObjectiveRegistry`]. The built-in registry holds the full
//! objective and its ablations:
//!
//! | name                | change against `full`                               |
//! |---------------------|-----------------------------------------------------|
//! | `full`              | page contrastive loss + click-sequence loss         |
//! | `no_ucs`            | drops the click-sequence loss                       |
//! | `no_contrast`       | `1 − cos(emb, rec)` on positives, no negatives      |
//! | `no_reconstruction` | self-attention pooling of clicks, no page query     |
//! | `no_neg_pv`         | negative page items removed from the matrix         |
//! | `small_batch`       | batch size forced to [`SMALL_BATCH`]                |

mod batch;
mod losses;

use std::collections::BTreeMap;
use std::sync::Arc;

use diffcore::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use batch::{encode_batch, EmbeddingBatch};
pub use losses::{
    cosine_reconstruction_loss, pv_contrastive_loss, reconstruct, self_attention_pool,
    similarity_matrix, split_click_sequence, ucs_loss, ClickSequenceSplit, ContrastiveLoss,
    Reconstruction,
};

use crate::error::{CoreError, Result};

/// Batch size of the `small_batch` ablation.
pub const SMALL_BATCH: usize = 8;

/// Scalar loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pv: f64,
    pub l_ucs: f64,
    pub total: f64,
}

/// Loss nodes of one batch plus diagnostics.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub l_pv: Var,
    pub l_ucs: Option<Var>,
    pub total: Var,
    /// Sum of `Sim(j, j)` over positive page slots.
    pub alignment_sum: f64,
    pub positives: usize,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_pv: tape.value(self.l_pv).item(),
            l_ucs: self.l_ucs.map_or(0.0, |v| tape.value(v).item()),
            total: tape.value(self.total).item(),
        }
    }
}

/// How the history is turned into a reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionKind {
    /// The page item queries its click history.
    CrossAttention,
    /// Clicks attend among themselves and are mean-pooled.
    SelfAttentionPool,
}

/// Which loss compares embeddings with reconstructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairTerm {
    Contrastive,
    CosineReconstruction,
}

pub trait PretrainObjective: Send + Sync {
    fn name(&self) -> &str;

    fn description(&self) -> &str {
        ""
    }

    /// Batch size actually used given the configured one.
    fn effective_batch_size(&self, configured: usize) -> usize {
        configured
    }

    fn loss_terms(&self, tape: &mut Tape, batch: &EmbeddingBatch, tau: f64) -> Result<LossTerms>;
}

/// The intention-reconstruction objective, parameterised so each ablation is
/// a different setting of the same switches.
#[derive(Clone, Debug, PartialEq)]
pub struct CourierObjective {
    pub name: String,
    pub description: String,
    pub reconstruction: ReconstructionKind,
    pub pair_term: PairTerm,
    pub use_ucs: bool,
    pub use_negative_pv: bool,
    pub batch_size: Option<usize>,
}

impl CourierObjective {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            description: "page contrastive loss plus click-sequence loss".into(),
            reconstruction: ReconstructionKind::CrossAttention,
            pair_term: PairTerm::Contrastive,
            use_ucs: true,
            use_negative_pv: true,
            batch_size: None,
        }
    }

    fn variant(name: &str, description: &str, edit: impl FnOnce(&mut Self)) -> Self {
        let mut o = Self::full();
        o.name = name.into();
        o.description = description.into();
        edit(&mut o);
        o
    }

    fn rebuild(
        &self,
        tape: &mut Tape,
        queries: Var,
        clicks: Var,
        groups: &[usize],
        click_mask: &[bool],
    ) -> Result<Var> {
        match self.reconstruction {
            ReconstructionKind::CrossAttention => {
                Ok(reconstruct(tape, queries, clicks, groups, click_mask)?.rec)
            }
            ReconstructionKind::SelfAttentionPool => {
                let pooled = self_attention_pool(tape, clicks, click_mask)?;
                Ok(tape.gather_rows(pooled, groups)?)
            }
        }
    }

    /// Returns the loss and the summed diagonal similarity over positives.
    fn pair_loss(
        &self,
        tape: &mut Tape,
        emb: Var,
        rec: Var,
        labels: &[u8],
        tau: f64,
        normalizer: f64,
    ) -> Result<(Var, f64)> {
        let sim = similarity_matrix(tape, emb, rec)?;
        let m = labels.len();
        let s = tape.value(sim);
        let alignment_sum = (0..m)
            .filter(|&j| labels[j] == 1)
            .map(|j| s.at2(j, j))
            .sum();
        let loss = match self.pair_term {
            PairTerm::Contrastive => pv_contrastive_loss(tape, sim, labels, tau, normalizer)?.loss,
            PairTerm::CosineReconstruction => cosine_reconstruction_loss(tape, emb, rec, labels)?,
        };
        Ok((loss, alignment_sum))
    }

    fn click_sequence_term(
        &self,
        tape: &mut Tape,
        batch: &EmbeddingBatch,
        tau: f64,
    ) -> Result<Option<Var>> {
        if !self.use_ucs {
            return Ok(None);
        }
        if batch.l_click < 2 {
            log::warn!("l_click < 2: click-sequence loss disabled");
            return Ok(None);
        }
        let split = split_click_sequence(tape, batch.emb_click, &batch.click_mask)?;
        let m = split.sessions.len();
        if m < 2 {
            return Ok(None);
        }
        let groups: Vec<usize> = (0..m).collect();
        let rec = self.rebuild(tape, split.targets, split.history, &groups, &split.history_mask)?;
        let (loss, _) = self.pair_loss(tape, split.targets, rec, &vec![1; m], tau, m as f64)?;
        Ok(Some(loss))
    }
}

impl PretrainObjective for CourierObjective {
    fn name(&self) -> &str {
        &self.name
    }

    fn description(&self) -> &str {
        &self.description
    }

    fn effective_batch_size(&self, configured: usize) -> usize {
        self.batch_size.unwrap_or(configured)
    }

    fn loss_terms(&self, tape: &mut Tape, batch: &EmbeddingBatch, tau: f64) -> Result<LossTerms> {
        let rows: Vec<usize> = (0..batch.batch * batch.l_pv)
            .filter(|&j| batch.pv_mask[j] && (self.use_negative_pv || batch.labels[j] == 1))
            .collect();
        let labels: Vec<u8> = rows.iter().map(|&j| batch.labels[j]).collect();
        let groups: Vec<usize> = rows.iter().map(|&j| j / batch.l_pv).collect();
        let positives = labels.iter().filter(|&&y| y == 1).count();
        let (l_pv, alignment_sum) = if rows.is_empty() {
            (tape.constant(Tensor::scalar(0.0)), 0.0)
        } else {
            let emb = tape.gather_rows(batch.emb_pv, &rows)?;
            let rec = self.rebuild(tape, emb, batch.emb_click, &groups, &batch.click_mask)?;
            let normalizer = (batch.batch * batch.l_pv) as f64;
            self.pair_loss(tape, emb, rec, &labels, tau, normalizer)?
        };
        let l_ucs = self.click_sequence_term(tape, batch, tau)?;
        let total = match l_ucs {
            Some(u) => tape.add(l_pv, u)?,
            None => l_pv,
        };
        Ok(LossTerms {
            l_pv,
            l_ucs,
            total,
            alignment_sum,
            positives,
        })
    }
}

/// Named objectives, selectable at run time.
#[derive(Clone, Default)]
pub struct ObjectiveRegistry {
    entries: BTreeMap<String, Arc<dyn PretrainObjective>>,
    order: Vec<String>,
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `full` and its five ablations.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(CourierObjective::full()));
        r.register(Arc::new(CourierObjective::variant(
            "no_ucs",
            "page contrastive loss only",
            |o| o.use_ucs = false,
        )));
        r.register(Arc::new(CourierObjective::variant(
            "no_contrast",
            "cosine reconstruction on positives, no negatives",
            |o| o.pair_term = PairTerm::CosineReconstruction,
        )));
        r.register(Arc::new(CourierObjective::variant(
            "no_reconstruction",
            "self-attention pooling of clicks instead of page-item queries",
            |o| o.reconstruction = ReconstructionKind::SelfAttentionPool,
        )));
        r.register(Arc::new(CourierObjective::variant(
            "no_neg_pv",
            "negative page items removed from the similarity matrix",
            |o| o.use_negative_pv = false,
        )));
        r.register(Arc::new(CourierObjective::variant(
            "small_batch",
            "full objective with a small batch",
            |o| o.batch_size = Some(SMALL_BATCH),
        )));
        r
    }

    /// Adds or replaces an objective under its own name.
    pub fn register(&mut self, objective: Arc<dyn PretrainObjective>) {
        let name = objective.name().to_string();
        if self.entries.insert(name.clone(), objective).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PretrainObjective>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            CoreError::Config(format!(
                "unknown variant {name:?}; known: {}",
                self.order.join(", ")
            ))
        })
    }

    /// Names in registration order.
    pub fn names(&self) -> &[String] {
        &self.order
    }
}

/// Loss of one batch under the named built-in objective.
pub fn courier_loss(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    variant: &str,
    tau: f64,
) -> Result<LossTerms> {
    ObjectiveRegistry::builtin()
        .get(variant)?
        .loss_terms(tape, batch, tau)
}
