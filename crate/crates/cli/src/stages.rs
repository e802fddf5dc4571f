//! One function per pipeline stage. Each checks its inputs, skips itself
//! when its manifest is still valid, and records a new manifest otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use courier_core::downstream::{
    evaluate_report, metrics_report, train_ctr, CtrConfig, CtrModel, ImageArtifact,
    ImageModeRegistry, ImageResources,
};
use courier_core::quantize::{
    assign_all, co_cluster_report, fit_with_config, read_cluster_map_tsv, write_centers_tsv,
    write_cluster_map_tsv, ClusterConfig, CoClusterReport,
};
use courier_core::synth::{
    generate_dataset, read_catalog, read_jsonl, read_sessions, write_catalog, write_sessions,
    DataConfig, CATALOG_FILE, SPACE_FILE, TEST_FILE, TRAIN_FILE,
};
use courier_core::trainer::{
    export_embeddings, pretrain as run_pretrain, read_embedding_tsv, resume, write_embedding_tsv,
    Checkpoint, PretrainConfig, TrainLog,
};
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{CliError, Result};
use crate::manifest::{sha256_file, FileDigest, StageOutcome, StageSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const CLUSTER_MAP_FILE: &str = "cluster_map.tsv";
pub const CENTERS_FILE: &str = "centers.tsv";
pub const CLUSTER_REPORT_FILE: &str = "cluster_report.json";
pub const MODEL_FILE: &str = "model.json";
pub const CTR_LOG_FILE: &str = "ctr_log.json";
pub const REPORT_FILE: &str = "report.json";

fn require_input(path: &Path, what: &str) -> Result<FileDigest> {
    if !path.is_file() {
        return Err(CliError::MissingInput(format!("{what} {}", path.display())));
    }
    FileDigest::of(path)
}

fn require_artifact(path: &Path, what: &str) -> Result<FileDigest> {
    if !path.is_file() {
        return Err(CliError::MissingArtifact(format!("{what} {}", path.display())));
    }
    FileDigest::of(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn spec(
    stage: &str,
    hash: String,
    seed: u64,
    manifest_path: PathBuf,
    inputs: Vec<(&str, FileDigest)>,
    force: bool,
) -> StageSpec {
    StageSpec {
        stage: stage.into(),
        config_hash: hash,
        seed,
        manifest_path,
        inputs: inputs.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
        force,
    }
}

pub fn gen_data(config: &DataConfig, out: &Path, force: bool) -> Result<StageOutcome> {
    std::fs::create_dir_all(out)?;
    let hash = config_hash("gen-data", config)?;
    spec("gen-data", hash, config.seed, out.join(MANIFEST_FILE), vec![], force).run(|| {
        let data = generate_dataset(config)?;
        let files = [
            ("config", out.join(CONFIG_FILE)),
            ("space", out.join(SPACE_FILE)),
            ("catalog", out.join(CATALOG_FILE)),
            ("train", out.join(TRAIN_FILE)),
            ("test", out.join(TEST_FILE)),
        ];
        write_json(&files[0].1, config)?;
        write_json(&files[1].1, &data.space)?;
        write_catalog(&files[2].1, &data.catalog)?;
        write_sessions(&files[3].1, &data.train)?;
        write_sessions(&files[4].1, &data.test)?;
        println!(
            "gen-data: {} items, {} train / {} test sessions -> {}",
            data.catalog.len(),
            data.train.len(),
            data.test.len(),
            out.display()
        );
        Ok(files.to_vec())
    })
}

pub fn pretrain(
    config: &PretrainConfig,
    data: &Path,
    out: &Path,
    resume_from: Option<&Path>,
    force: bool,
) -> Result<StageOutcome> {
    let catalog = data.join(CATALOG_FILE);
    let train = data.join(TRAIN_FILE);
    let mut inputs = vec![
        ("catalog", require_input(&catalog, "catalog")?),
        ("train", require_input(&train, "train sessions")?),
    ];
    if let Some(r) = resume_from {
        inputs.push(("resume", require_artifact(r, "checkpoint")?));
    }
    std::fs::create_dir_all(out)?;
    let hash = config_hash("pretrain", config)?;
    spec("pretrain", hash, config.seed, out.join(MANIFEST_FILE), inputs, force).run(|| {
        let items = read_catalog(&catalog)?;
        let sessions = read_sessions(&train)?;
        let (ckpt, log) = match resume_from {
            Some(r) => {
                let mut ckpt = Checkpoint::load(r)?;
                let mut expected = ckpt.config.clone();
                expected.epochs = config.epochs;
                if &expected != config {
                    return Err(CliError::Config(format!(
                        "{} was trained with a different config; only epochs may change on resume",
                        r.display()
                    )));
                }
                ckpt.config.epochs = config.epochs;
                let start = ckpt.step;
                let log = resume(&mut ckpt, &sessions, &items, config.epochs)?;
                println!("pretrain: resumed at step {start}, now at step {}", ckpt.step);
                (ckpt, log)
            }
            None => run_pretrain(&sessions, &items, config)?,
        };
        let table = export_embeddings(&ckpt.model, &items)?;
        let files = [
            ("config", out.join(CONFIG_FILE)),
            ("checkpoint", out.join(CHECKPOINT_FILE)),
            ("train_log", out.join(TRAIN_LOG_FILE)),
            ("embeddings", out.join(EMBEDDINGS_FILE)),
        ];
        write_json(&files[0].1, config)?;
        ckpt.save(&files[1].1)?;
        write_json(&files[2].1, &log)?;
        write_embedding_tsv(&files[3].1, &table)?;
        if let Some(last) = log.epochs.last() {
            println!(
                "pretrain[{}]: epoch {} loss {:.5} l_pv {:.5} l_ucs {:.5} uniformity {:.4} -> {}",
                config.variant,
                last.epoch,
                last.loss,
                last.l_pv,
                last.l_ucs,
                last.uniformity,
                out.display()
            );
        }
        Ok(files.to_vec())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub inertia_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub co_cluster: Option<CoClusterReport>,
}

pub fn cluster(
    config: &ClusterConfig,
    embeddings: &Path,
    catalog: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<StageOutcome> {
    let mut inputs = vec![("embeddings", require_artifact(embeddings, "embedding table")?)];
    if let Some(c) = catalog {
        inputs.push(("catalog", require_input(c, "catalog")?));
    }
    std::fs::create_dir_all(out)?;
    let hash = config_hash("cluster", config)?;
    spec("cluster", hash, config.seed, out.join(MANIFEST_FILE), inputs, force).run(|| {
        let table = read_embedding_tsv(embeddings)?;
        let model = fit_with_config(&table, config)?;
        let ids = assign_all(&table, &model, config.normalize)?;
        let co_cluster = match catalog {
            Some(c) => {
                let items = read_catalog(c)?;
                if items.len() != ids.len() {
                    return Err(CliError::Failed(format!(
                        "catalog has {} items, embedding table {}",
                        items.len(),
                        ids.len()
                    )));
                }
                let sets: Vec<Vec<usize>> = items.into_iter().map(|i| i.char_set).collect();
                Some(co_cluster_report(&sets, &ids)?)
            }
            None => None,
        };
        let report = ClusterReport {
            k: model.k,
            inertia: model.inertia,
            iterations: model.inertia_history.len() - 1,
            inertia_history: model.inertia_history.clone(),
            co_cluster,
        };
        let files = [
            ("config", out.join(CONFIG_FILE)),
            ("cluster_map", out.join(CLUSTER_MAP_FILE)),
            ("centers", out.join(CENTERS_FILE)),
            ("report", out.join(CLUSTER_REPORT_FILE)),
        ];
        write_json(&files[0].1, config)?;
        write_cluster_map_tsv(&files[1].1, &ids)?;
        write_centers_tsv(&files[2].1, &model.centers)?;
        write_json(&files[3].1, &report)?;
        match co_cluster {
            Some(c) => println!(
                "cluster: k={} inertia {:.4} after {} iterations; co-cluster ratio {:.2} -> {}",
                report.k,
                report.inertia,
                report.iterations,
                c.ratio,
                out.display()
            ),
            None => println!(
                "cluster: k={} inertia {:.4} after {} iterations -> {}",
                report.k,
                report.inertia,
                report.iterations,
                out.display()
            ),
        }
        Ok(files.to_vec())
    })
}

pub fn ctr_train(
    config: &CtrConfig,
    data: &Path,
    out: &Path,
    embeddings: Option<&Path>,
    clusters: Option<&Path>,
    force: bool,
) -> Result<StageOutcome> {
    let mode = ImageModeRegistry::builtin().get(&config.image_mode)?;
    for need in mode.requires() {
        let (given, what, flag) = match need {
            ImageArtifact::Embeddings => (embeddings, "embedding table", "--embeddings"),
            ImageArtifact::ClusterMap => (clusters, "cluster map", "--clusters"),
        };
        if given.is_none() {
            return Err(CliError::MissingArtifact(format!(
                "image mode {} needs the {what}; pass {flag} <path>",
                config.image_mode
            )));
        }
    }
    let catalog = data.join(CATALOG_FILE);
    let train = data.join(TRAIN_FILE);
    let mut inputs = vec![
        ("catalog", require_input(&catalog, "catalog")?),
        ("train", require_input(&train, "train sessions")?),
    ];
    if let Some(e) = embeddings {
        inputs.push(("embeddings", require_artifact(e, "embedding table")?));
    }
    if let Some(c) = clusters {
        inputs.push(("clusters", require_artifact(c, "cluster map")?));
    }
    std::fs::create_dir_all(out)?;
    let hash = config_hash("ctr-train", config)?;
    spec("ctr-train", hash, config.seed, out.join(MANIFEST_FILE), inputs, force).run(|| {
        let items = read_catalog(&catalog)?;
        let sessions = read_sessions(&train)?;
        let mut res = ImageResources::none();
        if let Some(e) = embeddings {
            res = res.with_embeddings(read_embedding_tsv(e)?);
        }
        if let Some(c) = clusters {
            let ids = read_cluster_map_tsv(c)?;
            let k = ids.iter().max().map_or(0, |m| m + 1);
            res = res.with_clusters(ids, k);
        }
        let l_click = sessions
            .first()
            .map(|s| s.click_history.len())
            .ok_or_else(|| CliError::MissingInput(format!("{} is empty", train.display())))?;
        let mut model = CtrModel::new(config, items.len(), l_click, res)?;
        let log = train_ctr(&mut model, &sessions)?;
        let files = [
            ("config", out.join(CONFIG_FILE)),
            ("model", out.join(MODEL_FILE)),
            ("log", out.join(CTR_LOG_FILE)),
        ];
        write_json(&files[0].1, config)?;
        std::fs::write(&files[1].1, model.to_json()?)?;
        write_json(&files[2].1, &log)?;
        println!(
            "ctr-train[{}]: final epoch loss {:.5} -> {}",
            config.image_mode,
            log.epoch_losses.last().copied().unwrap_or(f64::NAN),
            out.display()
        );
        Ok(files.to_vec())
    })
}

/// One line of an external score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub session_id: usize,
    /// One score per unmasked page slot, in page order.
    pub scores: Vec<f64>,
}

/// Where a scorer comes from.
pub enum Scorer<'a> {
    Model(&'a Path),
    Scores(&'a Path),
}

/// Manifest path of an eval report: `report.json` → `report.manifest.json`.
pub fn report_manifest_path(report: &Path) -> PathBuf {
    report.with_extension(MANIFEST_FILE)
}

pub fn eval(
    scorer: Scorer<'_>,
    data: &Path,
    report: &Path,
    train_log: Option<&Path>,
    seed: Option<u64>,
    force: bool,
) -> Result<StageOutcome> {
    let test = data.join(TEST_FILE);
    let mut inputs = vec![("test", require_input(&test, "test sessions")?)];
    let scorer_desc = match scorer {
        Scorer::Model(p) => {
            inputs.push(("model", require_artifact(p, "CTR model")?));
            "model"
        }
        Scorer::Scores(p) => {
            inputs.push(("scores", require_input(p, "score file")?));
            "scores"
        }
    };
    if let Some(l) = train_log {
        inputs.push(("train_log", require_artifact(l, "train log")?));
    }
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let hash = config_hash("eval", &(scorer_desc, seed))?;
    let manifest = report_manifest_path(report);
    spec("eval", hash, seed.unwrap_or(0), manifest, inputs, force).run(|| {
        let sessions = read_sessions(&test)?;
        let mut rep = match scorer {
            Scorer::Model(p) => {
                let model = CtrModel::from_json(&std::fs::read_to_string(p)?)?;
                let hash = config_hash("ctr-train", &model.config)?;
                evaluate_report(&model, &sessions, seed.unwrap_or(model.config.seed), &hash)?
            }
            Scorer::Scores(p) => {
                let rows: Vec<ScoreRow> = read_jsonl(p)?;
                if rows.len() != sessions.len() {
                    return Err(CliError::Failed(format!(
                        "{} has {} rows for {} test sessions",
                        p.display(),
                        rows.len(),
                        sessions.len()
                    )));
                }
                let mut grouped = Vec::with_capacity(rows.len());
                for (row, s) in rows.into_iter().zip(&sessions) {
                    let labels: Vec<u8> = s.valid_pv().map(|(_, y)| y).collect();
                    if row.session_id != s.session_id || row.scores.len() != labels.len() {
                        return Err(CliError::Failed(format!(
                            "score row for session {} does not match test session {}",
                            row.session_id, s.session_id
                        )));
                    }
                    grouped.push((row.scores, labels));
                }
                metrics_report(&grouped, "external", seed.unwrap_or(0), &sha256_file(p)?)?
            }
        };
        if let Some(l) = train_log {
            let log: TrainLog = serde_json::from_str(&std::fs::read_to_string(l)?)?;
            if let Some(last) = log.epochs.last() {
                rep.alignment = Some(last.alignment);
                rep.uniformity = Some(last.uniformity);
            }
        }
        write_json(report, &rep)?;
        println!(
            "eval[{}]: auc {:.4} gauc {:.4} ndcg@10 {:.4} over {} sessions ({} skipped for gauc) -> {}",
            rep.mode,
            rep.auc,
            rep.gauc,
            rep.ndcg10,
            rep.n_sessions,
            rep.n_skipped,
            report.display()
        );
        Ok(vec![("report", report.to_path_buf())])
    })
}
