//! Building blocks of the pre-training objective.

use diffcore::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// Reconstructed embeddings and the attention that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    /// `[m × d]`
    pub rec: Var,
    /// `[m × l_click]`, rows are probability vectors over valid clicks.
    pub alpha: Var,
}

/// Rebuilds each query row as an attention-weighted sum of its click
/// embeddings: `rec[i] = Σ_k α_ik · clicks[groups[i], k]`, with
/// `α_i = softmax(q_i · clicks[groups[i]]ᵀ / √d)` over unmasked clicks.
///
/// `clicks` is `[g × l_click × d]` and `click_mask` is `g·l_click` long.
pub fn reconstruct(
    tape: &mut Tape,
    queries: Var,
    clicks: Var,
    groups: &[usize],
    click_mask: &[bool],
) -> Result<Reconstruction> {
    let att = tape.grouped_attention(queries, clicks, clicks, groups, click_mask)?;
    Ok(Reconstruction {
        rec: att.out,
        alpha: att.weights,
    })
}

/// Query-free pooling: every valid click attends over its own history, and
/// the outputs are averaged per group. Returns `[g × d]`.
pub fn self_attention_pool(tape: &mut Tape, clicks: Var, click_mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(clicks).to_vec();
    let (g, l, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(clicks, &[g * l, d])?;
    let valid: Vec<usize> = (0..g * l).filter(|&r| click_mask[r]).collect();
    let groups: Vec<usize> = valid.iter().map(|r| r / l).collect();
    let mut counts = vec![0usize; g];
    for &grp in &groups {
        counts[grp] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(CoreError::Diff(diffcore::DiffError::Degenerate(format!(
            "group {empty} has no valid click"
        ))));
    }
    let q = tape.gather_rows(flat, &valid)?;
    let att = tape.grouped_attention(q, clicks, clicks, &groups, click_mask)?;
    let mut pool = Tensor::zeros(&[g, valid.len()]);
    for (col, &grp) in groups.iter().enumerate() {
        pool.data_mut()[grp * valid.len() + col] = 1.0 / counts[grp] as f64;
    }
    let p = tape.constant(pool);
    Ok(tape.matmul(p, att.out)?)
}

/// Cosine similarity of every embedding row against every reconstruction:
/// `S[j0][j1] = cos(emb[j0], rec[j1])`.
pub fn similarity_matrix(tape: &mut Tape, emb: Var, rec: Var) -> Result<Var> {
    let e = tape.l2_normalize(emb, 1)?;
    let r = tape.l2_normalize(rec, 1)?;
    let rt = tape.transpose(r)?;
    Ok(tape.matmul(e, rt)?)
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLoss {
    pub loss: Var,
    pub positives: usize,
}

/// Column-wise softmax contrastive loss over a similarity matrix.
///
/// `loss = −(1/normalizer) · Σ_j labels[j] · log_softmax(S/τ, axis 0)[j][j]`.
/// Label-0 columns add nothing, but their rows stay in every column's
/// denominator. With no positive label the loss is a constant 0 and
/// `positives == 0` flags it.
pub fn pv_contrastive_loss(
    tape: &mut Tape,
    sim: Var,
    labels: &[u8],
    tau: f64,
    normalizer: f64,
) -> Result<ContrastiveLoss> {
    let shape = tape.shape(sim).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] != labels.len() {
        return Err(CoreError::Data(format!(
            "similarity matrix {:?} does not match {} labels",
            shape,
            labels.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(CoreError::Config(format!("tau must be > 0, got {tau}")));
    }
    if !(normalizer > 0.0) {
        return Err(CoreError::Config("loss normalizer must be > 0".into()));
    }
    let m = shape[0];
    if m < 2 {
        return Err(CoreError::Config(format!(
            "contrastive loss needs at least 2 rows, got {m}"
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        log::warn!("contrastive loss called without positive labels; returning 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(ContrastiveLoss { loss: zero, positives });
    }
    let scaled = tape.scale(sim, 1.0 / tau);
    let log_prob = tape.log_softmax(scaled, 0)?;
    let mut diag = Tensor::zeros(&[m, m]);
    for (j, &y) in labels.iter().enumerate() {
        diag.data_mut()[j * m + j] = f64::from(y);
    }
    let diag = tape.constant(diag);
    let picked = tape.mul(log_prob, diag)?;
    let total = tape.sum(picked);
    let loss = tape.scale(total, -1.0 / normalizer);
    Ok(ContrastiveLoss { loss, positives })
}

/// `mean_{j: labels[j]=1} (1 − cos(emb[j], rec[j]))`: reconstruction without
/// negatives. Zero when there is no positive.
pub fn cosine_reconstruction_loss(
    tape: &mut Tape,
    emb: Var,
    rec: Var,
    labels: &[u8],
) -> Result<Var> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == 1).collect();
    if pos.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let e = tape.l2_normalize(emb, 1)?;
    let r = tape.l2_normalize(rec, 1)?;
    let prod = tape.mul(e, r)?;
    let cos = tape.sum_axis(prod, 1)?;
    let cos_pos = tape.gather_rows(cos, &pos)?;
    let mean = tape.mean(cos_pos);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Next-click targets and their remaining histories, cut out of a click
/// embedding tensor `[b × l_click × d]`.
#[derive(Clone, Debug)]
pub struct ClickSequenceSplit {
    /// `[b' × d]`: first (most recent) click of each eligible session.
    pub targets: Var,
    /// `[b' × (l_click − 1) × d]`
    pub history: Var,
    pub history_mask: Vec<bool>,
    /// Indices of the sessions that have a target and ≥1 remaining click.
    pub sessions: Vec<usize>,
}

pub fn split_click_sequence(
    tape: &mut Tape,
    clicks: Var,
    click_mask: &[bool],
) -> Result<ClickSequenceSplit> {
    let shape = tape.shape(clicks).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    if l < 2 {
        return Err(CoreError::Config(format!(
            "click-sequence loss needs l_click >= 2, got {l}"
        )));
    }
    let sessions: Vec<usize> = (0..b)
        .filter(|&g| click_mask[g * l] && click_mask[g * l + 1..(g + 1) * l].iter().any(|&m| m))
        .collect();
    let flat = tape.reshape(clicks, &[b * l, d])?;
    let target_rows: Vec<usize> = sessions.iter().map(|g| g * l).collect();
    let hist_rows: Vec<usize> = sessions
        .iter()
        .flat_map(|g| g * l + 1..(g + 1) * l)
        .collect();
    let history_mask = hist_rows.iter().map(|&r| click_mask[r]).collect();
    let targets = tape.gather_rows(flat, &target_rows)?;
    let hist = tape.gather_rows(flat, &hist_rows)?;
    let history = tape.reshape(hist, &[sessions.len(), l - 1, d])?;
    Ok(ClickSequenceSplit {
        targets,
        history,
        history_mask,
        sessions,
    })
}

/// Click-sequence contrastive loss: each session's first click is the
/// target, the rest its history, every label is 1, and the loss is the same
/// column-softmax contrastive loss with `M` = number of sessions.
pub fn ucs_loss(tape: &mut Tape, clicks: Var, click_mask: &[bool], tau: f64) -> Result<Var> {
    let batch = tape.shape(clicks).first().copied().unwrap_or(0);
    if batch < 2 {
        return Err(CoreError::Config(format!(
            "click-sequence loss needs batch >= 2, got {batch}"
        )));
    }
    let split = split_click_sequence(tape, clicks, click_mask)?;
    let m = split.sessions.len();
    let groups: Vec<usize> = (0..m).collect();
    let r = reconstruct(tape, split.targets, split.history, &groups, &split.history_mask)?;
    let sim = similarity_matrix(tape, split.targets, r.rec)?;
    Ok(pv_contrastive_loss(tape, sim, &vec![1; m], tau, m as f64)?.loss)
}
