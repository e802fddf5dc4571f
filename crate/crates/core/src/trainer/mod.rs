//! Pre-training loop: shuffled mini-batches, Adam, per-epoch diagnostics,
//! checkpoints and embedding export.

mod adam;
mod checkpoint;
mod export;

use std::time::Instant;

use diffcore::{DiffError, Tape};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use export::{export_embeddings, read_embedding_tsv, write_embedding_tsv};

use crate::encoder::{EmbeddingModel, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::objective::{encode_batch, ObjectiveRegistry, PretrainObjective};
use crate::seed;
use crate::synth::{Item, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub variant: String,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub encoder: EncoderConfig,
    /// Catalog items used for the uniformity diagnostic.
    pub uniformity_sample: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: "full".into(),
            tau: 0.05,
            batch_size: 64,
            epochs: 20,
            lr: 1e-4,
            weight_decay: 1e-6,
            encoder: EncoderConfig::default(),
            uniformity_sample: 256,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("pretrain: {m}")));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be > 0 and weight_decay >= 0".into());
        }
        if self.uniformity_sample < 2 {
            return bad("uniformity_sample must be >= 2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub l_pv: f64,
    pub l_ucs: f64,
    /// Mean `Sim(j, j)` over positive page slots seen this epoch.
    pub alignment: f64,
    /// Mean pairwise cosine of sampled catalog embeddings after the epoch.
    pub uniformity: f64,
    /// Not serialized so that logs of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: String,
    pub batch_size: usize,
    pub initial_uniformity: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn total_wall_time_s(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_time_s).sum()
    }
}

/// Mean cosine over all distinct pairs of `rows`. Zero-norm rows count as
/// orthogonal to everything.
pub fn mean_pairwise_cosine(rows: &[Vec<f64>]) -> f64 {
    let unit: Vec<Option<Vec<f64>>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            (n > diffcore::NORM_EPS).then(|| r.iter().map(|x| x / n).collect())
        })
        .collect();
    let n = unit.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if let (Some(a), Some(b)) = (&unit[i], &unit[j]) {
                total += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    total / (n * (n - 1) / 2) as f64
}

fn uniformity_items(config: &PretrainConfig, catalog: &[Item]) -> Vec<Vec<f64>> {
    let mut rng = seed::stream(config.seed, "pretrain.uniformity", 0);
    let n = config.uniformity_sample.min(catalog.len());
    let mut idx = rand::seq::index::sample(&mut rng, catalog.len(), n).into_vec();
    idx.sort_unstable();
    idx.iter().map(|&i| catalog[i].features.clone()).collect()
}

fn uniformity(model: &EmbeddingModel, sample: &[Vec<f64>]) -> Result<f64> {
    Ok(mean_pairwise_cosine(&model.embed(sample)?))
}

/// Batch boundaries for one epoch: full batches only, or one batch of every
/// session when there are fewer than `batch_size` (but at least 2).
fn epoch_batches(n: usize, batch_size: usize, config_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::stream(config_seed, "pretrain.shuffle", epoch as u64);
    order.shuffle(&mut rng);
    if n < batch_size {
        return if n >= 2 { vec![order] } else { Vec::new() };
    }
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Fresh model and optimizer for `config`, before any update.
pub fn init_checkpoint(feature_dim: usize, config: &PretrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let model = EmbeddingModel::new(feature_dim, &config.encoder, config.seed)?;
    let adam = AdamState::new(
        AdamConfig::new(config.lr, config.weight_decay),
        model.params.tensors(),
    );
    Ok(Checkpoint {
        config: config.clone(),
        model,
        adam,
        step: 0,
        epoch: 0,
    })
}

/// Trains from scratch with a built-in objective.
pub fn pretrain(
    train: &[Session],
    catalog: &[Item],
    config: &PretrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    pretrain_with(&ObjectiveRegistry::builtin(), train, catalog, config)
}

pub fn pretrain_with(
    registry: &ObjectiveRegistry,
    train: &[Session],
    catalog: &[Item],
    config: &PretrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let feature_dim = catalog
        .first()
        .map(|it| it.features.len())
        .ok_or_else(|| CoreError::Data("empty catalog".into()))?;
    let mut ckpt = init_checkpoint(feature_dim, config)?;
    let log = resume_with(registry, &mut ckpt, train, catalog, config.epochs)?;
    Ok((ckpt, log))
}

/// Continues `ckpt` until it has completed `until_epoch` epochs. The
/// returned log covers only the epochs run by this call.
pub fn resume(
    ckpt: &mut Checkpoint,
    train: &[Session],
    catalog: &[Item],
    until_epoch: usize,
) -> Result<TrainLog> {
    resume_with(&ObjectiveRegistry::builtin(), ckpt, train, catalog, until_epoch)
}

pub fn resume_with(
    registry: &ObjectiveRegistry,
    ckpt: &mut Checkpoint,
    train: &[Session],
    catalog: &[Item],
    until_epoch: usize,
) -> Result<TrainLog> {
    let config = ckpt.config.clone();
    config.validate()?;
    if train.is_empty() {
        return Err(CoreError::Data("no training sessions".into()));
    }
    let objective = registry.get(&config.variant)?;
    let batch_size = objective.effective_batch_size(config.batch_size);
    let sample = uniformity_items(&config, catalog);
    let mut log = TrainLog {
        variant: config.variant.clone(),
        batch_size,
        initial_uniformity: uniformity(&ckpt.model, &sample)?,
        epochs: Vec::new(),
    };
    while ckpt.epoch < until_epoch {
        let started = Instant::now();
        let batches = epoch_batches(train.len(), batch_size, config.seed, ckpt.epoch);
        let (mut loss, mut l_pv, mut l_ucs) = (0.0, 0.0, 0.0);
        let (mut align_sum, mut positives) = (0.0, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let sessions: Vec<&Session> = idx.iter().map(|&i| &train[i]).collect();
            let out = train_step(objective.as_ref(), ckpt, &sessions, catalog, config.tau)
                .map_err(|e| match e {
                    CoreError::Numeric { detail, .. } => CoreError::Numeric {
                        step: ckpt.step,
                        batch: b,
                        detail: format!("epoch {}: {detail}", ckpt.epoch),
                    },
                    other => other,
                })?;
            loss += out.total;
            l_pv += out.l_pv;
            l_ucs += out.l_ucs;
            align_sum += out.alignment_sum;
            positives += out.positives;
        }
        let steps = batches.len();
        let per = |x: f64| if steps == 0 { 0.0 } else { x / steps as f64 };
        ckpt.epoch += 1;
        log.epochs.push(EpochRecord {
            epoch: ckpt.epoch,
            steps,
            loss: per(loss),
            l_pv: per(l_pv),
            l_ucs: per(l_ucs),
            alignment: if positives == 0 {
                0.0
            } else {
                align_sum / positives as f64
            },
            uniformity: uniformity(&ckpt.model, &sample)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {} loss {:.5} l_pv {:.5} l_ucs {:.5}",
            ckpt.epoch,
            per(loss),
            per(l_pv),
            per(l_ucs)
        );
    }
    Ok(log)
}

struct StepOutput {
    total: f64,
    l_pv: f64,
    l_ucs: f64,
    alignment_sum: f64,
    positives: usize,
}

fn train_step(
    objective: &dyn PretrainObjective,
    ckpt: &mut Checkpoint,
    sessions: &[&Session],
    catalog: &[Item],
    tau: f64,
) -> Result<StepOutput> {
    let numeric = |detail: String| CoreError::Numeric {
        step: 0,
        batch: 0,
        detail,
    };
    let lift = |e: CoreError| match e {
        CoreError::Diff(DiffError::Numeric(d)) => numeric(d),
        other => other,
    };
    let mut tape = Tape::new();
    let vars = ckpt.model.params.register(&mut tape);
    let batch = encode_batch(&mut tape, &ckpt.model, &vars, sessions, catalog).map_err(lift)?;
    let batch = batch.project(&mut tape, &ckpt.model, &vars).map_err(lift)?;
    let terms = objective.loss_terms(&mut tape, &batch, tau).map_err(lift)?;
    let b = terms.breakdown(&tape);
    if !b.total.is_finite() {
        return Err(numeric(format!(
            "non-finite loss (l_pv {}, l_ucs {})",
            b.l_pv, b.l_ucs
        )));
    }
    tape.backward(terms.total)?;
    let grads: Vec<_> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(numeric(format!(
            "non-finite gradient for {}",
            ckpt.model.params.names()[i]
        )));
    }
    adam_step(ckpt.model.params.tensors_mut(), &grads, &mut ckpt.adam)?;
    ckpt.step += 1;
    Ok(StepOutput {
        total: b.total,
        l_pv: b.l_pv,
        l_ucs: b.l_ucs,
        alignment_sum: terms.alignment_sum,
        positives: terms.positives,
    })
}
