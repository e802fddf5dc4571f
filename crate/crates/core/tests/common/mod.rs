#![allow(dead_code)]

use courier_core::objective::EmbeddingBatch;
use courier_core::synth::{Item, Session};
use diffcore::{DiffError, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain-array contents of an embedding batch.
#[derive(Clone, Debug)]
pub struct RawBatch {
    pub b: usize,
    pub l_pv: usize,
    pub l_click: usize,
    pub d: usize,
    pub emb_pv: Vec<f64>,
    pub emb_click: Vec<f64>,
    pub pv_mask: Vec<bool>,
    pub click_mask: Vec<bool>,
    pub labels: Vec<u8>,
}

impl RawBatch {
    /// Random batch: every session has at least one valid page slot with a
    /// positive label and at least one click; valid slots form a prefix.
    pub fn random(r: &mut ChaCha8Rng, b: usize, l_pv: usize, l_click: usize, d: usize) -> Self {
        let mut pv_mask = Vec::new();
        let mut click_mask = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..b {
            let n_pv = r.gen_range(1..=l_pv);
            let pos = r.gen_range(0..n_pv);
            for j in 0..l_pv {
                pv_mask.push(j < n_pv);
                labels.push(if j >= n_pv {
                    0
                } else if j == pos {
                    1
                } else {
                    u8::from(r.gen_bool(0.4))
                });
            }
            let n_click = r.gen_range(1..=l_click);
            for k in 0..l_click {
                click_mask.push(k < n_click);
            }
        }
        let mut fill = |mask: &[bool]| -> Vec<f64> {
            mask.iter()
                .flat_map(|&m| {
                    (0..d)
                        .map(|_| if m { r.gen_range(-1.0..1.0) } else { 0.0 })
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let emb_pv = fill(&pv_mask);
        let emb_click = fill(&click_mask);
        Self {
            b,
            l_pv,
            l_click,
            d,
            emb_pv,
            emb_click,
            pv_mask,
            click_mask,
            labels,
        }
    }

    pub fn tensors(&self) -> [Tensor; 2] {
        [
            Tensor::new(vec![self.b * self.l_pv, self.d], self.emb_pv.clone()).unwrap(),
            Tensor::new(vec![self.b, self.l_click, self.d], self.emb_click.clone()).unwrap(),
        ]
    }

    pub fn on_tape(&self, tape: &mut Tape) -> EmbeddingBatch {
        let [p, c] = self.tensors();
        let (p, c) = (tape.param(p), tape.param(c));
        self.with_vars(p, c)
    }

    pub fn with_vars(&self, emb_pv: Var, emb_click: Var) -> EmbeddingBatch {
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

    pub fn pv_row(&self, j: usize) -> &[f64] {
        &self.emb_pv[j * self.d..(j + 1) * self.d]
    }

    pub fn click_row(&self, s: usize, k: usize) -> &[f64] {
        let o = (s * self.l_click + k) * self.d;
        &self.emb_click[o..o + self.d]
    }
}

pub fn to_diff(e: courier_core::CoreError) -> DiffError {
    DiffError::Contract(e.to_string())
}

/// Catalog of `n` items with random `d`-dim features.
pub fn random_catalog(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Item> {
    (0..n)
        .map(|i| Item {
            item_id: i,
            category_id: 0,
            char_set: vec![0],
            features: (0..d).map(|_| r.gen_range(-1.0..1.0)).collect(),
        })
        .collect()
}

/// Session over a random catalog with a valid prefix of page and click
/// slots, at least one positive.
pub fn random_session(r: &mut ChaCha8Rng, id: usize, n_items: usize, l_pv: usize, l_click: usize) -> Session {
    let n_pv = r.gen_range(1..=l_pv);
    let n_click = r.gen_range(1..=l_click);
    let mut labels: Vec<u8> = (0..l_pv).map(|j| u8::from(j < n_pv && r.gen_bool(0.5))).collect();
    labels[0] = 1;
    Session {
        session_id: id,
        user_id: 0,
        timestamp: id as u64,
        click_history: (0..l_click).map(|k| if k < n_click { r.gen_range(0..n_items) } else { 0 }).collect(),
        click_mask: (0..l_click).map(|k| k < n_click).collect(),
        pv_items: (0..l_pv).map(|j| if j < n_pv { r.gen_range(0..n_items) } else { 0 }).collect(),
        pv_mask: (0..l_pv).map(|j| j < n_pv).collect(),
        labels,
    }
}
