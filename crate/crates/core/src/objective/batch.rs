use diffcore::{Tape, Tensor, Var};

use crate::encoder::EmbeddingModel;
use crate::error::{CoreError, Result};
use crate::synth::{Item, Session};

/// Embeddings for one batch of sessions, living on a tape.
///
/// Padded slots hold all-zero rows and are flagged `false` in the masks.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    /// `[batch·l_pv × d]`, session-major.
    pub emb_pv: Var,
    /// `[batch × l_click × d]`.
    pub emb_click: Var,
    pub pv_mask: Vec<bool>,
    pub click_mask: Vec<bool>,
    /// Aligned with `emb_pv` rows; 0 on padded slots.
    pub labels: Vec<u8>,
    pub batch: usize,
    pub l_pv: usize,
    pub l_click: usize,
    pub dim: usize,
}

fn row_mask(tape: &mut Tape, mask: &[bool], dim: usize) -> Var {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(dim))
        .collect();
    tape.constant(Tensor::new(vec![mask.len(), dim], data).expect("mask shape"))
}

/// Runs the encoder over every page and click slot of `sessions`.
pub fn encode_batch(
    tape: &mut Tape,
    model: &EmbeddingModel,
    vars: &[Var],
    sessions: &[&Session],
    catalog: &[Item],
) -> Result<EmbeddingBatch> {
    let first = sessions
        .first()
        .ok_or_else(|| CoreError::Data("empty batch".into()))?;
    let (l_pv, l_click) = (first.pv_items.len(), first.click_history.len());
    let b = sessions.len();
    let d_in = model.feature_dim();
    let mut feats = Vec::with_capacity(b * (l_pv + l_click) * d_in);
    let mut pv_mask = Vec::with_capacity(b * l_pv);
    let mut click_mask = Vec::with_capacity(b * l_click);
    let mut labels = Vec::with_capacity(b * l_pv);
    let push = |item: usize, sid: usize, feats: &mut Vec<f64>| -> Result<()> {
        let it = catalog.get(item).ok_or_else(|| {
            CoreError::Data(format!("session {sid} references unknown item {item}"))
        })?;
        if it.features.len() != d_in {
            return Err(CoreError::Data(format!(
                "item {item} has {} features, encoder expects {d_in}",
                it.features.len()
            )));
        }
        feats.extend_from_slice(&it.features);
        Ok(())
    };
    for s in sessions {
        if s.pv_items.len() != l_pv || s.click_history.len() != l_click {
            return Err(CoreError::Data(format!(
                "session {} is not padded to l_pv={l_pv}, l_click={l_click}",
                s.session_id
            )));
        }
        for (j, &it) in s.pv_items.iter().enumerate() {
            push(it, s.session_id, &mut feats)?;
            pv_mask.push(s.pv_mask[j]);
            labels.push(if s.pv_mask[j] { s.labels[j] } else { 0 });
        }
    }
    for s in sessions {
        for (k, &it) in s.click_history.iter().enumerate() {
            push(it, s.session_id, &mut feats)?;
            click_mask.push(s.click_mask[k]);
        }
    }
    let n_pv = b * l_pv;
    let x = tape.constant(Tensor::new(vec![n_pv + b * l_click, d_in], feats)?);
    let enc = model.encode(tape, vars, x)?;
    let dim = model.embedding_dim();
    let all_mask: Vec<bool> = pv_mask.iter().chain(&click_mask).copied().collect();
    let m = row_mask(tape, &all_mask, dim);
    let enc = tape.mul(enc, m)?;
    let pv_idx: Vec<usize> = (0..n_pv).collect();
    let click_idx: Vec<usize> = (n_pv..n_pv + b * l_click).collect();
    let emb_pv = tape.gather_rows(enc, &pv_idx)?;
    let click_flat = tape.gather_rows(enc, &click_idx)?;
    let emb_click = tape.reshape(click_flat, &[b, l_click, dim])?;
    Ok(EmbeddingBatch {
        emb_pv,
        emb_click,
        pv_mask,
        click_mask,
        labels,
        batch: b,
        l_pv,
        l_click,
        dim,
    })
}

impl EmbeddingBatch {
    /// Passes both embedding sets through the projection head (when the model
    /// has one) and re-zeroes padded rows.
    pub fn project(&self, tape: &mut Tape, model: &EmbeddingModel, vars: &[Var]) -> Result<Self> {
        if model.head.is_none() {
            return Ok(self.clone());
        }
        let pv = model.project(tape, vars, self.emb_pv)?;
        let mpv = row_mask(tape, &self.pv_mask, self.dim);
        let emb_pv = tape.mul(pv, mpv)?;
        let flat = tape.reshape(self.emb_click, &[self.batch * self.l_click, self.dim])?;
        let click = model.project(tape, vars, flat)?;
        let mc = row_mask(tape, &self.click_mask, self.dim);
        let click = tape.mul(click, mc)?;
        let emb_click = tape.reshape(click, &[self.batch, self.l_click, self.dim])?;
        Ok(Self {
            emb_pv,
            emb_click,
            ..self.clone()
        })
    }
}
