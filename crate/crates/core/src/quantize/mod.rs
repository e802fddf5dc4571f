//! Turning embeddings into downstream features: k-means cluster ids and
//! cosine similarity scores.

mod io;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{read_centers_tsv, read_cluster_map_tsv, write_centers_tsv, write_cluster_map_tsv};

use crate::error::{CoreError, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once an iteration lowers inertia by less than this.
    pub tol: f64,
    /// L2-normalize embeddings before fitting and assigning.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_iters: 100,
            tol: 1e-9,
            normalize: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after initialization and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; the lowest index wins ties.
fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_rows(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(CoreError::Config("k-means needs non-empty points".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(CoreError::Data("points have differing dimensions".into()));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(CoreError::Data("non-finite point".into()));
    }
    Ok(d)
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_fit(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel> {
    if k == 0 {
        return Err(CoreError::Config("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(CoreError::Config(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = check_rows(points)?;
    let mut rng = seed::stream(seed, "kmeans.init", 0);
    let mut centers = kmeans_pp(points, k, &mut rng);
    let mut assign: Vec<usize> = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for p in points {
        let (c, d) = nearest(p, &centers);
        assign.push(c);
        inertia += d;
    }
    let mut history = vec![inertia];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Empty cluster: move it onto the point worst served by its
                // current center.
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centers[assign[a]]);
                        let db = sq_dist(&points[b], &centers[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("at least k points");
                taken[far] = true;
                centers[c] = points[far].clone();
            }
        }
        let mut next = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centers);
            assign[i] = c;
            next += d;
        }
        if next > inertia * (1.0 + 1e-12) + 1e-12 {
            return Err(CoreError::Numeric {
                step: history.len() as u64,
                batch: 0,
                detail: format!("k-means inertia rose from {inertia} to {next}"),
            });
        }
        let improvement = inertia - next;
        inertia = next;
        history.push(inertia);
        if improvement < tol {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        centers,
        inertia,
        inertia_history: history,
    })
}

/// Fits on (optionally L2-normalized) embeddings per `config`.
pub fn fit_with_config(embeddings: &[Vec<f64>], config: &ClusterConfig) -> Result<ClusterModel> {
    let prepared = prepare(embeddings, config.normalize)?;
    kmeans_fit(&prepared, config.k, config.seed, config.max_iters, config.tol)
}

/// Copies `rows`, L2-normalizing each when `normalize` is set.
pub fn prepare(rows: &[Vec<f64>], normalize: bool) -> Result<Vec<Vec<f64>>> {
    if !normalize {
        return Ok(rows.to_vec());
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= diffcore::NORM_EPS {
                return Err(CoreError::Data(format!("row {i} has zero norm")));
            }
            Ok(r.iter().map(|x| x / n).collect())
        })
        .collect()
}

pub fn assign_cluster(embedding: &[f64], model: &ClusterModel) -> Result<usize> {
    let d = model.centers.first().map_or(0, Vec::len);
    if embedding.len() != d {
        return Err(CoreError::Data(format!(
            "embedding has {} dims, centers have {d}",
            embedding.len()
        )));
    }
    Ok(nearest(embedding, &model.centers).0)
}

/// Cluster id of every row of `embeddings`, normalizing first if asked.
pub fn assign_all(
    embeddings: &[Vec<f64>],
    model: &ClusterModel,
    normalize: bool,
) -> Result<Vec<usize>> {
    prepare(embeddings, normalize)?
        .iter()
        .map(|e| assign_cluster(e, model))
        .collect()
}

fn cosine(a: &[f64], b: &[f64], what: &str) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= diffcore::NORM_EPS || nb <= diffcore::NORM_EPS {
        return Err(CoreError::Diff(diffcore::DiffError::Degenerate(format!(
            "zero-norm {what} in similarity score"
        ))));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Cosine similarity of `target` with every unmasked history row; masked
/// slots get 0.
pub fn simscore_features(target: &[f64], history: &[Vec<f64>], mask: &[bool]) -> Result<Vec<f64>> {
    if history.len() != mask.len() {
        return Err(CoreError::Data("history and mask lengths differ".into()));
    }
    history
        .iter()
        .zip(mask)
        .map(|(h, &m)| {
            if !m {
                return Ok(0.0);
            }
            if h.len() != target.len() {
                return Err(CoreError::Data("history row dimension mismatch".into()));
            }
            cosine(target, h, "history row")
        })
        .collect()
}

/// How often items that share a ground-truth characteristic end up in the
/// same cluster, against items with disjoint characteristics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoClusterReport {
    pub sharing_pairs: u64,
    pub disjoint_pairs: u64,
    /// Same-cluster rate among pairs sharing a characteristic.
    pub sharing_rate: f64,
    /// Same-cluster rate among disjoint pairs.
    pub disjoint_rate: f64,
    pub ratio: f64,
}

/// Counts every unordered item pair once. `char_sets` must be sorted.
pub fn co_cluster_report(char_sets: &[Vec<usize>], assignments: &[usize]) -> Result<CoClusterReport> {
    if char_sets.len() != assignments.len() {
        return Err(CoreError::Data(format!(
            "{} characteristic sets but {} assignments",
            char_sets.len(),
            assignments.len()
        )));
    }
    let shares = |a: &[usize], b: &[usize]| {
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Equal => return true,
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        false
    };
    let (mut sp, mut ss, mut dp, mut ds) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..char_sets.len() {
        for j in i + 1..char_sets.len() {
            let same = u64::from(assignments[i] == assignments[j]);
            if shares(&char_sets[i], &char_sets[j]) {
                sp += 1;
                ss += same;
            } else {
                dp += 1;
                ds += same;
            }
        }
    }
    if sp == 0 || dp == 0 {
        return Err(CoreError::UndefinedMetric(
            "need both sharing and disjoint item pairs".into(),
        ));
    }
    let sharing_rate = ss as f64 / sp as f64;
    let disjoint_rate = ds as f64 / dp as f64;
    Ok(CoClusterReport {
        sharing_pairs: sp,
        disjoint_pairs: dp,
        sharing_rate,
        disjoint_rate,
        ratio: if disjoint_rate > 0.0 {
            sharing_rate / disjoint_rate
        } else {
            f64::INFINITY
        },
    })
}
