//! Ranking metrics: global AUC, per-session GAUC and NDCG@k.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Rank-statistic AUC; tied scores share their average rank, which gives a
/// tied positive/negative pair half credit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::Data("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CoreError::Data("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CoreError::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 averaged.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedMetric {
    pub value: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

/// Unweighted mean of per-session AUC over sessions holding both classes.
pub fn gauc(sessions: &[(Vec<f64>, Vec<u8>)]) -> Result<GroupedMetric> {
    let mut total = 0.0;
    let mut used = 0;
    for (s, y) in sessions {
        match auc(s, y) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(CoreError::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(CoreError::UndefinedMetric("no session has both classes".into()));
    }
    Ok(GroupedMetric {
        value: total / used as f64,
        n_used: used,
        n_skipped: sessions.len() - used,
    })
}

/// NDCG@k with binary gains. Items are ranked by descending score, ties by
/// original index. `None` when the session has no positive.
pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || k == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| labels[i] == 1)
        .map(|(r, _)| discount(r))
        .sum();
    let idcg: f64 = (0..positives.min(k)).map(discount).sum();
    Some(dcg / idcg)
}

/// Mean NDCG@k over sessions with at least one positive.
pub fn grouped_ndcg(sessions: &[(Vec<f64>, Vec<u8>)], k: usize) -> Result<GroupedMetric> {
    let vals: Vec<f64> = sessions
        .iter()
        .filter_map(|(s, y)| ndcg_at_k(s, y, k))
        .collect();
    if vals.is_empty() {
        return Err(CoreError::UndefinedMetric("no session has a positive".into()));
    }
    Ok(GroupedMetric {
        value: vals.iter().sum::<f64>() / vals.len() as f64,
        n_used: vals.len(),
        n_skipped: sessions.len() - vals.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub gauc: f64,
    pub ndcg10: f64,
    pub n_sessions: usize,
    /// Sessions left out of GAUC for holding a single class.
    pub n_skipped: usize,
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniformity: Option<f64>,
}

/// All three metrics from per-session `(scores, labels)`.
pub fn metrics_report(
    sessions: &[(Vec<f64>, Vec<u8>)],
    mode: &str,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let all_scores: Vec<f64> = sessions.iter().flat_map(|(s, _)| s.iter().copied()).collect();
    let all_labels: Vec<u8> = sessions.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    let g = gauc(sessions)?;
    Ok(MetricsReport {
        auc: auc(&all_scores, &all_labels)?,
        gauc: g.value,
        ndcg10: grouped_ndcg(sessions, 10)?.value,
        n_sessions: sessions.len(),
        n_skipped: g.n_skipped,
        mode: mode.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        alignment: None,
        uniformity: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_counting_fixture() {
        assert_eq!(auc(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(CoreError::UndefinedMetric(_))));
    }

    #[test]
    fn hand_dcg() {
        let v = ndcg_at_k(&[3.0, 2.0, 1.0], &[1, 0, 1], 10).unwrap();
        let want = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.91972).abs() < 1e-4);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(ndcg_at_k(&[0.5, 0.5], &[1, 0], 10), Some(1.0));
        assert!(ndcg_at_k(&[0.5, 0.5], &[0, 1], 10).unwrap() < 1.0);
    }
}
