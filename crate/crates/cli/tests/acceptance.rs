//! Acceptance run: every criterion prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use courier_cli::ablate::AblationTable;
use courier_cli::manifest::{sha256_file, RunManifest};
use courier_core::downstream::{auc, gauc, grouped_ndcg, ndcg_at_k, MetricsReport};
use courier_core::objective::{
    courier_loss, pv_contrastive_loss, reconstruct, similarity_matrix, ucs_loss, EmbeddingBatch,
};
use courier_core::quantize::kmeans_fit;
use courier_core::synth::{generate_dataset, DataConfig};
use courier_core::trainer::{pretrain, PretrainConfig};
use diffcore::{grad_check, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_courier")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn courier(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| format!("cannot start courier: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "courier {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(stdout)
}

/// Page and click embeddings of a random batch; valid slots form a prefix,
/// every session has a positive page item and at least `min_clicks` clicks.
#[derive(Clone)]
struct Batch {
    b: usize,
    l_pv: usize,
    l_click: usize,
    d: usize,
    pv: Vec<f64>,
    click: Vec<f64>,
    pv_mask: Vec<bool>,
    click_mask: Vec<bool>,
    labels: Vec<u8>,
}

impl Batch {
    fn random(r: &mut ChaCha8Rng, b: usize, l_pv: usize, l_click: usize, d: usize, min_clicks: usize) -> Self {
        let (mut pv_mask, mut click_mask, mut labels) = (vec![], vec![], vec![]);
        for _ in 0..b {
            let n = r.gen_range(1..=l_pv);
            let pos = r.gen_range(0..n);
            for j in 0..l_pv {
                pv_mask.push(j < n);
                labels.push(u8::from(j < n && (j == pos || r.gen_bool(0.4))));
            }
            let c = r.gen_range(min_clicks..=l_click);
            click_mask.extend((0..l_click).map(|k| k < c));
        }
        let mut fill = |m: &[bool]| -> Vec<f64> {
            m.iter()
                .flat_map(|&v| (0..d).map(|_| if v { r.gen_range(-1.0..1.0) } else { 0.0 }).collect::<Vec<_>>())
                .collect()
        };
        let pv = fill(&pv_mask);
        let click = fill(&click_mask);
        Self { b, l_pv, l_click, d, pv, click, pv_mask, click_mask, labels }
    }

    fn tensors(&self) -> [Tensor; 2] {
        [
            Tensor::new(vec![self.b * self.l_pv, self.d], self.pv.clone()).unwrap(),
            Tensor::new(vec![self.b, self.l_click, self.d], self.click.clone()).unwrap(),
        ]
    }

    fn embedding_batch(&self, emb_pv: diffcore::Var, emb_click: diffcore::Var) -> EmbeddingBatch {
        EmbeddingBatch {
            emb_pv,
            emb_click,
            pv_mask: self.pv_mask.clone(),
            click_mask: self.click_mask.clone(),
            labels: self.labels.clone(),
            batch: self.b,
            l_pv: self.l_pv,
            l_click: self.l_click,
            dim: self.d,
        }
    }

    fn loss(&self, variant: &str, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let [p, c] = self.tensors();
        let (p, c) = (tape.constant(p), tape.constant(c));
        let t = courier_loss(&mut tape, &self.embedding_batch(p, c), variant, tau).unwrap();
        tape.value(t.total).item()
    }

    fn pv_row(&self, j: usize) -> &[f64] {
        &self.pv[j * self.d..(j + 1) * self.d]
    }

    fn click_row(&self, s: usize, k: usize) -> &[f64] {
        let o = (s * self.l_click + k) * self.d;
        &self.click[o..o + self.d]
    }

    fn valid_clicks(&self, s: usize) -> Vec<usize> {
        (0..self.l_click).filter(|&k| self.click_mask[s * self.l_click + k]).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Scalar attention reconstruction of `q` from `keys`.
fn scalar_reconstruct(q: &[f64], keys: &[&[f64]]) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot(q, k) / scale).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; q.len()];
    for (wi, k) in w.iter().zip(keys) {
        for (o, x) in out.iter_mut().zip(*k) {
            *o += wi / z * x;
        }
    }
    out
}

/// Double loop over the similarity matrix: column-wise softmax, diagonal
/// picked on positives.
fn scalar_contrastive(emb: &[Vec<f64>], rec: &[Vec<f64>], labels: &[u8], tau: f64, normalizer: f64) -> f64 {
    let m = emb.len();
    let mut total = 0.0;
    for j in 0..m {
        if labels[j] != 1 {
            continue;
        }
        let mut denom = 0.0;
        for j0 in 0..m {
            denom += (cos(&emb[j0], &rec[j]) / tau).exp();
        }
        total += (cos(&emb[j], &rec[j]) / tau).exp().ln() - denom.ln();
    }
    -total / normalizer
}

fn scalar_pv_loss(b: &Batch, tau: f64) -> f64 {
    let (mut emb, mut rec, mut labels) = (vec![], vec![], vec![]);
    for j in 0..b.b * b.l_pv {
        if !b.pv_mask[j] {
            continue;
        }
        let s = j / b.l_pv;
        let keys: Vec<&[f64]> = b.valid_clicks(s).into_iter().map(|k| b.click_row(s, k)).collect();
        emb.push(b.pv_row(j).to_vec());
        rec.push(scalar_reconstruct(b.pv_row(j), &keys));
        labels.push(b.labels[j]);
    }
    scalar_contrastive(&emb, &rec, &labels, tau, (b.b * b.l_pv) as f64)
}

fn scalar_ucs_loss(b: &Batch, tau: f64) -> f64 {
    let (mut emb, mut rec) = (vec![], vec![]);
    for s in 0..b.b {
        let valid = b.valid_clicks(s);
        let target = b.click_row(s, valid[0]);
        let keys: Vec<&[f64]> = valid[1..].iter().map(|&k| b.click_row(s, k)).collect();
        emb.push(target.to_vec());
        rec.push(scalar_reconstruct(target, &keys));
    }
    let m = emb.len();
    scalar_contrastive(&emb, &rec, &vec![1; m], tau, m as f64)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let batch = Batch::random(&mut rng(1), 4, 3, 3, 8, 1);
    let f = |tape: &mut Tape, vars: &[diffcore::Var]| {
        let eb = batch.embedding_batch(vars[0], vars[1]);
        let t = courier_loss(tape, &eb, "full", 0.05)
            .map_err(|e| diffcore::DiffError::Contract(e.to_string()))?;
        Ok(t.total)
    };
    let err = grad_check(f, &batch.tensors(), 1e-5).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        err < 1e-3 && secs < 10.0,
        format!("max relative error {err:.3e} (< 1e-3) in {secs:.2}s (< 10s)"),
    )
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let (mut worst_pv, mut worst_ucs) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let b = r.gen_range(2..=8);
        let tau = r.gen_range(0.05..1.0);
        let (l_pv, l_click, d) = (r.gen_range(1..=5), r.gen_range(2..=5), r.gen_range(2..=8));
        let batch = Batch::random(&mut r, b, l_pv, l_click, d, 2);
        let vectorized = batch.loss("no_ucs", tau);
        worst_pv = worst_pv.max((vectorized - scalar_pv_loss(&batch, tau)).abs());

        let mut tape = Tape::new();
        let [_, c] = batch.tensors();
        let c = tape.constant(c);
        let u = ucs_loss(&mut tape, c, &batch.click_mask, tau).map_err(|e| e.to_string())?;
        worst_ucs = worst_ucs.max((tape.value(u).item() - scalar_ucs_loss(&batch, tau)).abs());
    }
    check(
        worst_pv < 1e-10 && worst_ucs < 1e-10,
        format!("max |vectorized - scalar| page {worst_pv:.2e}, click-sequence {worst_ucs:.2e} (< 1e-10) over 100 batches"),
    )
}

fn contrastive_value(s: Vec<Vec<f64>>, labels: &[u8], tau: f64) -> f64 {
    let m = s.len();
    let mut tape = Tape::new();
    let sim = tape.constant(Tensor::new(vec![m, m], s.concat()).unwrap());
    let l = pv_contrastive_loss(&mut tape, sim, labels, tau, m as f64).unwrap();
    tape.value(l.loss).item()
}

fn criterion_3() -> Outcome {
    let got = contrastive_value(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &[1, 0], 1.0);
    let e = std::f64::consts::E;
    let hand = -(e / (e + 1.0)).ln() / 2.0;
    let printed = 0.15665;
    let mut worst_uniform = 0.0f64;
    let mut r = rng(3);
    for _ in 0..50 {
        let m = r.gen_range(2..10);
        let c = r.gen_range(-1.0..1.0);
        let labels: Vec<u8> = (0..m).map(|_| u8::from(r.gen_bool(0.5))).collect();
        let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let v = contrastive_value(vec![vec![c; m]; m], &labels, r.gen_range(0.02..2.0));
        worst_uniform = worst_uniform.max((v - pos / m as f64 * (m as f64).ln()).abs());
    }
    check(
        (got - hand).abs() < 1e-5 && worst_uniform < 1e-12,
        format!(
            "fixture {got:.7} vs hand softmax -ln(e/(e+1))/2 = {hand:.7} (|diff| {:.1e}); the printed 0.15665 is {:.1e} off the same expression; uniform-S max error {worst_uniform:.1e}",
            (got - hand).abs(),
            (printed - hand).abs()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let (mut worst_rec, mut worst_sum, mut min_alpha) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..1000 {
        let g = r.gen_range(1..4);
        let (l_pv, l_click, d) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(2..7));
        let batch = Batch::random(&mut r, g, l_pv, l_click, d, 1);
        let rows: Vec<usize> = (0..g * batch.l_pv).filter(|&j| batch.pv_mask[j]).collect();
        let groups: Vec<usize> = rows.iter().map(|j| j / batch.l_pv).collect();
        let mut tape = Tape::new();
        let [p, c] = batch.tensors();
        let (p, c) = (tape.constant(p), tape.constant(c));
        let q = tape.gather_rows(p, &rows).unwrap();
        let out = reconstruct(&mut tape, q, c, &groups, &batch.click_mask).map_err(|e| e.to_string())?;
        let rec = tape.value(out.rec).clone();
        let alpha = tape.value(out.alpha).clone();
        for (i, &grp) in groups.iter().enumerate() {
            let a = &alpha.data()[i * batch.l_click..(i + 1) * batch.l_click];
            worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
            min_alpha = a.iter().cloned().fold(min_alpha, f64::min);
            for dim in 0..batch.d {
                let hull: f64 = (0..batch.l_click).map(|k| a[k] * batch.click_row(grp, k)[dim]).sum();
                worst_rec = worst_rec.max((hull - rec.data()[i * batch.d + dim]).abs());
            }
        }
    }
    let mut worst_perm = 0.0f64;
    for _ in 0..100 {
        let b = r.gen_range(2..6);
        let batch = Batch::random(&mut r, b, 4, 5, 6, 1);
        let mut perm = batch.clone();
        let mut perm_all = batch.clone();
        for s in 0..batch.b {
            let valid = batch.valid_clicks(s);
            // The most recent click is the click-sequence target, so the full
            // loss only sees history order behind it.
            let mut rest = valid[1..].to_vec();
            rest.shuffle(&mut r);
            let mut all = valid.clone();
            all.shuffle(&mut r);
            for (dst, src) in valid[1..].iter().zip(&rest) {
                let o = (s * batch.l_click + dst) * batch.d;
                perm.click[o..o + batch.d].copy_from_slice(batch.click_row(s, *src));
            }
            for (dst, src) in valid.iter().zip(&all) {
                let o = (s * batch.l_click + dst) * batch.d;
                perm_all.click[o..o + batch.d].copy_from_slice(batch.click_row(s, *src));
            }
        }
        worst_perm = worst_perm
            .max((batch.loss("full", 0.05) - perm.loss("full", 0.05)).abs())
            .max((batch.loss("no_ucs", 0.05) - perm_all.loss("no_ucs", 0.05)).abs());
    }
    check(
        worst_rec < 1e-10 && worst_sum < 1e-10 && min_alpha >= 0.0 && worst_perm < 1e-10,
        format!(
            "1000 reconstructions: hull error {worst_rec:.1e}, |sum(alpha) - 1| {worst_sum:.1e}, min alpha {min_alpha:.1e}; click permutation moves the loss by {worst_perm:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    let d = 16;
    for _ in 0..100 {
        let n = 100;
        let mut unit = || -> Vec<f64> {
            let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let norm = dot(&v, &v).sqrt();
            v.iter().map(|x| x / norm).collect()
        };
        let xs: Vec<Vec<f64>> = (0..n).map(|_| unit()).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| unit()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, d], xs.concat()).unwrap());
        let y = tape.constant(Tensor::new(vec![n, d], ys.concat()).unwrap());
        let s = similarity_matrix(&mut tape, x, y).map_err(|e| e.to_string())?;
        let s = tape.value(s).clone();
        for i in 0..n {
            let dist2: f64 = xs[i].iter().zip(&ys[i]).map(|(a, b)| (a - b).powi(2)).sum();
            worst = worst.max((s.at2(i, i) - (2.0 - dist2) / 2.0).abs());
        }
    }
    check(worst < 1e-10, format!("10000 unit pairs: max |Sim - (2 - |x-y|^2)/2| = {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let data = generate_dataset(&DataConfig::default()).map_err(|e| e.to_string())?;
    let run = |variant: &str| {
        let cfg = PretrainConfig {
            variant: variant.into(),
            ..PretrainConfig::default()
        };
        pretrain(&data.train, &data.catalog, &cfg).map(|(_, log)| log)
    };
    let collapse = run("no_contrast").map_err(|e| e.to_string())?;
    let full = run("full").map_err(|e| e.to_string())?;
    let first_above = collapse.epochs.iter().find(|e| e.uniformity > 0.95).map(|e| e.epoch);
    let full_max = full.epochs.iter().map(|e| e.uniformity).fold(full.initial_uniformity, f64::max);
    let secs = start.elapsed().as_secs_f64();
    check(
        first_above.is_some() && full_max < 0.5 && secs < 300.0,
        format!(
            "no_contrast uniformity {:.4} after 20 epochs (> 0.95 from epoch {}); full peaks at {full_max:.4} (needs < 0.5, initial {:.4}); {secs:.0}s",
            collapse.epochs.last().map_or(f64::NAN, |e| e.uniformity),
            first_above.map_or("never".into(), |e| e.to_string()),
            full.initial_uniformity
        ),
    )
}

fn criterion_7(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let out = tmp.join("modes");
    let grid = configs().join("grid_modes.json");
    courier(&["ablate", "--config", grid.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let table: AblationTable =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let auc_of = |mode: &str| {
        table
            .cells
            .iter()
            .find(|c| c.image_mode == mode)
            .and_then(|c| c.metrics.as_ref())
            .map(|m| m.auc)
            .unwrap_or(f64::NAN)
    };
    let (none, sim, cid, vec) = (auc_of("none"), auc_of("simscore"), auc_of("clusterid"), auc_of("vector"));
    let secs = start.elapsed().as_secs_f64();
    check(
        cid - none >= 0.01 && secs < 600.0,
        format!(
            "test AUC clusterid {cid:.4} vs none {none:.4} (lift {:+.4}, needs >= +0.01); simscore {sim:.4}, vector {vec:.4}; clusterid >= simscore: {}; {secs:.0}s",
            cid - none,
            cid >= sim
        ),
    )
}

fn pair_auc(s: &[f64], y: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn criterion_8(tmp: &Path) -> Outcome {
    let mut r = rng(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.gen_range(2..60);
        let mut y: Vec<u8> = (0..n).map(|_| u8::from(r.gen_bool(0.4))).collect();
        y[0] = 1;
        y[1] = 0;
        let levels = r.gen_range(2..20);
        let s: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        if auc(&s, &y).unwrap() != pair_auc(&s, &y) {
            mismatches += 1;
        }
    }
    let g = gauc(&[(vec![0.9, 0.1], vec![1, 0]), (vec![0.5, 0.5], vec![1, 0])]).unwrap().value;
    let nd = ndcg_at_k(&[3.0, 2.0, 1.0], &[1, 0, 1], 10).unwrap();
    let hand = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());

    // Perfect scorer through the CLI: scores equal labels.
    let data = tmp.join("metrics-data");
    let cfg = tmp.join("metrics-data.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 8, "num_train": 50, "num_test": 80, "keep_rate": 0.5, "catalog": {"num_items": 100}}"#,
    )
    .unwrap();
    courier(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()])?;
    let test = courier_core::synth::read_sessions(&data.join("test.jsonl")).unwrap();
    let lines: Vec<String> = test
        .iter()
        .map(|s| {
            let scores: Vec<f64> = s.valid_pv().map(|(_, y)| f64::from(y)).collect();
            serde_json::json!({"session_id": s.session_id, "scores": scores}).to_string()
        })
        .collect();
    let scores = tmp.join("oracle.jsonl");
    std::fs::write(&scores, lines.join("\n") + "\n").unwrap();
    let report = tmp.join("oracle-report.json");
    courier(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--scores",
        scores.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ])?;
    let rep: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let grouped: Vec<(Vec<f64>, Vec<u8>)> = test
        .iter()
        .map(|s| {
            let y: Vec<u8> = s.valid_pv().map(|(_, y)| y).collect();
            (y.iter().map(|&v| f64::from(v)).collect(), y)
        })
        .collect();
    let core_perfect = grouped_ndcg(&grouped, 10).unwrap().value;
    check(
        mismatches == 0
            && g == 0.75
            && (nd - 0.91972).abs() < 1e-4
            && (nd - hand).abs() < 1e-12
            && rep.auc == 1.0
            && rep.gauc == 1.0
            && rep.ndcg10 == 1.0
            && core_perfect == 1.0,
        format!(
            "AUC vs pair counting: {mismatches} mismatches in 1000; GAUC fixture {g}; NDCG fixture {nd:.5}; oracle report auc {} gauc {} ndcg10 {}",
            rep.auc, rep.gauc, rep.ndcg10
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let mut rises = 0;
    for _ in 0..100 {
        let n = r.gen_range(10..120);
        let d = r.gen_range(1..6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
        let k = r.gen_range(1..8);
        let m = kmeans_fit(&pts, k, r.gen(), 100, 0.0).map_err(|e| e.to_string())?;
        rises += m.inertia_history.windows(2).filter(|w| w[1] > w[0]).count();
    }
    let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
    // Exhaustive oracle over every split of the four points into two groups.
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << 3) {
        let groups: [Vec<&Vec<f64>>; 2] = [
            pts.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, p)| p).collect(),
            pts.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 0).map(|(_, p)| p).collect(),
        ];
        let cost: f64 = groups
            .iter()
            .map(|g| {
                let c: Vec<f64> = (0..2).map(|k| g.iter().map(|p| p[k]).sum::<f64>() / g.len() as f64).collect();
                g.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>()
            })
            .sum();
        best = best.min(cost);
    }
    let m = kmeans_fit(&pts, 2, 0, 100, 1e-12).map_err(|e| e.to_string())?;
    let mut centers = m.centers.clone();
    centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
    check(
        rises == 0
            && centers == vec![vec![0.0, 0.5], vec![10.0, 0.5]]
            && (m.inertia - 1.0).abs() < 1e-9
            && (m.inertia - best).abs() < 1e-9,
        format!(
            "inertia rose {rises} times over 100 runs; fixture centers {centers:?}, inertia {} (exhaustive best {best})",
            m.inertia
        ),
    )
}

fn run_pipeline(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let c = configs();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let o = |x: &str| s(&out.join(x));
    courier(&["gen-data", "--config", &s(&c.join("data.json")), "--out", &o("data")])?;
    courier(&["pretrain", "--config", &s(&c.join("pretrain.json")), "--data", &o("data"), "--out", &o("pretrain")])?;
    courier(&[
        "cluster",
        "--config",
        &s(&c.join("cluster.json")),
        "--embeddings",
        &o("pretrain/embeddings.tsv"),
        "--data",
        &o("data"),
        "--out",
        &o("cluster"),
    ])?;
    courier(&[
        "ctr-train",
        "--config",
        &s(&c.join("ctr.json")),
        "--image-mode",
        "clusterid",
        "--clusters",
        &o("cluster/cluster_map.tsv"),
        "--data",
        &o("data"),
        "--out",
        &o("ctr"),
    ])?;
    courier(&["eval", "--data", &o("data"), "--model", &o("ctr/model.json"), "--report", &o("ctr/report.json")])?;
    Ok(start.elapsed())
}

fn criterion_10(tmp: &Path) -> Outcome {
    let out = tmp.join("ablation");
    let grid = configs().join("grid_ablation.json");
    let start = Instant::now();
    courier(&["ablate", "--config", grid.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let grid_secs = start.elapsed().as_secs_f64();
    let table: AblationTable =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let text_ok = out.join("ablation.txt").is_file();
    let base = &table.cells[table.baseline];
    let base_zero = base
        .delta
        .as_ref()
        .is_some_and(|d| d.auc == 0.0 && d.gauc == 0.0 && d.ndcg10 == 0.0);
    let variants: Vec<&str> = table.cells.iter().map(|c| c.variant.as_str()).collect();
    let all_ok = table.failed() == 0;
    let pipeline = run_pipeline(&tmp.join("pipeline-a"))?;
    check(
        text_ok && base_zero && all_ok && table.cells.len() == 6 && pipeline.as_secs_f64() < 900.0,
        format!(
            "grid of {} variants ({}) in {grid_secs:.0}s, baseline deltas zero: {base_zero}; full pipeline in {:.0}s (< 900s)",
            table.cells.len(),
            variants.join(", "),
            pipeline.as_secs_f64()
        ),
    )
}

fn output_digests(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for stage in ["data", "pretrain", "cluster", "ctr"] {
        let mpath = root.join(stage).join("manifest.json");
        let m = RunManifest::load(&mpath).unwrap();
        for (role, d) in &m.outputs {
            let actual = sha256_file(&root.join(stage).join(&d.path)).unwrap();
            assert_eq!(actual, d.sha256, "{stage}/{role} does not match its manifest");
            out.insert(format!("{stage}/{role}"), actual);
        }
    }
    let report = root.join("ctr/report.json");
    out.insert("eval/report".into(), sha256_file(&report).unwrap());
    out
}

fn criterion_11(tmp: &Path) -> Outcome {
    let a = tmp.join("pipeline-a");
    if !a.join("ctr/report.json").is_file() {
        run_pipeline(&a)?;
    }
    let b = tmp.join("pipeline-b");
    run_pipeline(&b)?;
    let (da, db) = (output_digests(&a), output_digests(&b));
    let differing: Vec<&String> = da.keys().filter(|k| da.get(*k) != db.get(*k)).collect();
    check(
        differing.is_empty() && da.len() == db.len(),
        format!(
            "{} artifacts compared across two runs; differing: {:?}",
            da.len(),
            differing
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient correctness", Box::new(criterion_1)),
        ("loss-oracle equivalence", Box::new(criterion_2)),
        ("hand-computed fixture", Box::new(criterion_3)),
        ("convex hull and permutation invariants", Box::new(criterion_4)),
        ("cosine-euclidean identity", Box::new(criterion_5)),
        ("collapse experiment", Box::new(criterion_6)),
        ("downstream lift", Box::new(|| criterion_7(t))),
        ("metric oracles", Box::new(|| criterion_8(t))),
        ("k-means", Box::new(criterion_9)),
        ("ablation harness and pipeline", Box::new(|| criterion_10(t))),
        ("determinism", Box::new(|| criterion_11(t))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string()) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} {name}: PASS ({d}) [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({d}) [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
