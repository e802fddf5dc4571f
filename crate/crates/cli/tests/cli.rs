use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use courier_cli::ablate::AblationTable;
use courier_cli::manifest::{sha256_file, RunManifest};
use courier_core::downstream::MetricsReport;
use courier_core::synth::read_sessions;
use courier_core::trainer::TrainLog;
use serde_json::{json, Value};

fn courier(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_courier")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = courier(args);
    assert!(
        out.status.success(),
        "courier {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

/// Small configs so every stage runs in well under a second.
struct Tiny {
    dir: tempfile::TempDir,
}

impl Tiny {
    fn new() -> Self {
        let t = Self { dir: tempfile::tempdir().unwrap() };
        write(
            &t.p("data.json"),
            &json!({"seed": 3, "num_train": 80, "num_test": 40, "keep_rate": 0.5, "catalog": {"num_items": 120}}),
        );
        t.pretrain_cfg(&json!({}));
        write(&t.p("cluster.json"), &json!({"k": 4}));
        write(&t.p("ctr.json"), &json!({"epochs": 2, "batch_sessions": 16, "mlp_hidden": [8, 8, 4, 4]}));
        write(
            &t.p("pipeline.json"),
            &json!({"seed": 3, "data": "data.json", "pretrain": "pretrain.json", "cluster": "cluster.json", "ctr": "ctr.json"}),
        );
        t
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain_cfg(&self, overrides: &Value) -> PathBuf {
        let mut v = json!({"epochs": 2, "batch_size": 16, "uniformity_sample": 32, "encoder": {"hidden": [16], "embedding_dim": 8}});
        for (k, x) in overrides.as_object().unwrap() {
            v[k] = x.clone();
        }
        write(&self.p("pretrain.json"), &v)
    }

    fn gen_data(&self) -> PathBuf {
        let out = self.p("data");
        ok(&["gen-data", "--config", s(&self.p("data.json")), "--out", s(&out)]);
        out
    }

    fn pretrain(&self, extra: &[&str]) -> PathBuf {
        let data = self.gen_data();
        let out = self.p("pretrain");
        let (cfg, data, out_s) = (self.p("pretrain.json"), s(&data).to_owned(), s(&out).to_owned());
        let mut args = vec!["pretrain", "--config", s(&cfg), "--data", &data, "--out", &out_s];
        args.extend(extra);
        ok(&args);
        out
    }
}

fn line_count(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

#[test]
fn gen_data_writes_requested_session_counts() {
    let t = Tiny::new();
    let data = t.gen_data();
    assert_eq!(line_count(&data.join("train.jsonl")), 80);
    assert_eq!(line_count(&data.join("test.jsonl")), 40);
    assert_eq!(line_count(&data.join("catalog.jsonl")), 120);
    let m = RunManifest::load(&data.join("manifest.json")).unwrap();
    assert_eq!(m.stage, "gen-data");
    assert_eq!(m.seed, 3);
}

#[test]
fn identical_configs_give_identical_files() {
    let t = Tiny::new();
    let a = t.p("a");
    let b = t.p("b");
    ok(&["gen-data", "--config", s(&t.p("data.json")), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&t.p("data.json")), "--out", s(&b)]);
    for f in ["catalog.jsonl", "train.jsonl", "test.jsonl", "space.json"] {
        assert_eq!(sha256_file(&a.join(f)).unwrap(), sha256_file(&b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let t = Tiny::new();
    let a = t.p("a");
    let b = t.p("b");
    ok(&["gen-data", "--config", s(&t.p("data.json")), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&t.p("data.json")), "--seed", "4", "--out", s(&b)]);
    assert_ne!(
        sha256_file(&a.join("train.jsonl")).unwrap(),
        sha256_file(&b.join("train.jsonl")).unwrap()
    );
}

#[test]
fn missing_config_key_exits_2_and_names_it() {
    let t = Tiny::new();
    let cfg = write(&t.p("bad.json"), &json!({"num_train": 10, "num_test": 5, "keep_rate": 0.5}));
    let out = courier(&["gen-data", "--config", s(&cfg), "--out", s(&t.p("x"))]);
    assert_eq!(code(&out), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn unknown_variant_exits_2() {
    let t = Tiny::new();
    let data = t.gen_data();
    let out = courier(&["pretrain", "--data", s(&data), "--variant", "bogus", "--out", s(&t.p("p"))]);
    assert_eq!(code(&out), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let t = Tiny::new();
    let out = courier(&[
        "pretrain",
        "--config",
        s(&t.p("pretrain.json")),
        "--data",
        s(&t.p("nowhere")),
        "--out",
        s(&t.p("p")),
    ]);
    assert_eq!(code(&out), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn no_ucs_logs_zero_click_sequence_loss() {
    let t = Tiny::new();
    let out = t.pretrain(&["--variant", "no_ucs"]);
    let log: TrainLog = serde_json::from_str(&std::fs::read_to_string(out.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log.variant, "no_ucs");
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs.iter().all(|e| e.l_ucs == 0.0 && e.l_pv > 0.0));
}

#[test]
fn embeddings_cover_catalog_with_one_id_column() {
    let t = Tiny::new();
    let out = t.pretrain(&[]);
    let text = std::fs::read_to_string(out.join("embeddings.tsv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| r.split('\t').count() == 9));
}

#[test]
fn resume_continues_training() {
    let t = Tiny::new();
    let first = t.pretrain(&[]);
    let log1: TrainLog =
        serde_json::from_str(&std::fs::read_to_string(first.join("train_log.json")).unwrap()).unwrap();
    t.pretrain_cfg(&json!({"epochs": 4}));
    let data = t.p("data");
    let second = t.p("resumed");
    ok(&[
        "pretrain",
        "--config",
        s(&t.p("pretrain.json")),
        "--data",
        s(&data),
        "--resume",
        s(&first.join("checkpoint.json")),
        "--out",
        s(&second),
    ]);
    let log2: TrainLog =
        serde_json::from_str(&std::fs::read_to_string(second.join("train_log.json")).unwrap()).unwrap();
    let epochs: Vec<usize> = log2.epochs.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, vec![3, 4]);
    assert!(log2.epochs.iter().all(|e| e.steps == log1.epochs[0].steps));

    let straight = t.p("straight");
    ok(&["pretrain", "--config", s(&t.p("pretrain.json")), "--data", s(&data), "--out", s(&straight)]);
    assert_eq!(
        sha256_file(&second.join("embeddings.tsv")).unwrap(),
        sha256_file(&straight.join("embeddings.tsv")).unwrap()
    );
}

#[test]
fn clusterid_without_cluster_map_exits_4() {
    let t = Tiny::new();
    let data = t.gen_data();
    let out = courier(&[
        "ctr-train",
        "--config",
        s(&t.p("ctr.json")),
        "--data",
        s(&data),
        "--image-mode",
        "clusterid",
        "--out",
        s(&t.p("ctr")),
    ]);
    assert_eq!(code(&out), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--clusters"));
}

#[test]
fn oracle_scores_evaluate_to_one() {
    let t = Tiny::new();
    let data = t.gen_data();
    let rows: Vec<String> = read_sessions(&data.join("test.jsonl"))
        .unwrap()
        .iter()
        .map(|s| {
            let scores: Vec<f64> = s.valid_pv().map(|(_, y)| f64::from(y)).collect();
            json!({"session_id": s.session_id, "scores": scores}).to_string()
        })
        .collect();
    let scores = t.p("scores.jsonl");
    std::fs::write(&scores, rows.join("\n")).unwrap();
    let report = t.p("report.json");
    ok(&["eval", "--data", s(&data), "--scores", s(&scores), "--report", s(&report)]);
    let r: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!((r.auc, r.gauc, r.ndcg10), (1.0, 1.0, 1.0));
    assert!(t.p("report.manifest.json").is_file());
}

#[test]
fn full_chain_runs_and_reports() {
    let t = Tiny::new();
    let pre = t.pretrain(&[]);
    let data = t.p("data");
    let cl = t.p("cluster");
    ok(&[
        "cluster",
        "--config",
        s(&t.p("cluster.json")),
        "--embeddings",
        s(&pre.join("embeddings.tsv")),
        "--data",
        s(&data),
        "--out",
        s(&cl),
    ]);
    assert_eq!(line_count(&cl.join("cluster_map.tsv")), 120);
    assert_eq!(line_count(&cl.join("centers.tsv")), 4);
    let ctr = t.p("ctr");
    ok(&[
        "ctr-train",
        "--config",
        s(&t.p("ctr.json")),
        "--data",
        s(&data),
        "--image-mode",
        "clusterid",
        "--clusters",
        s(&cl.join("cluster_map.tsv")),
        "--out",
        s(&ctr),
    ]);
    let report = ctr.join("report.json");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--model",
        s(&ctr.join("model.json")),
        "--train-log",
        s(&pre.join("train_log.json")),
        "--report",
        s(&report),
    ]);
    let r: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&r.auc));
    assert!(r.uniformity.is_some());
}

#[test]
fn rerun_is_skipped_until_an_output_is_tampered_with() {
    let t = Tiny::new();
    let data = t.gen_data();
    let before = std::fs::read(data.join("manifest.json")).unwrap();
    let again = ok(&["gen-data", "--config", s(&t.p("data.json")), "--out", s(&data)]);
    assert!(again.contains("up to date"), "{again}");
    assert_eq!(std::fs::read(data.join("manifest.json")).unwrap(), before);

    let train = data.join("train.jsonl");
    let original = std::fs::read(&train).unwrap();
    std::fs::write(&train, b"tampered\n").unwrap();
    let rerun = ok(&["gen-data", "--config", s(&t.p("data.json")), "--out", s(&data)]);
    assert!(!rerun.contains("up to date"));
    assert_eq!(std::fs::read(&train).unwrap(), original);

    let forced = ok(&["gen-data", "--config", s(&t.p("data.json")), "--out", s(&data), "--force"]);
    assert!(!forced.contains("up to date"));
}

#[test]
fn diverging_training_exits_5() {
    let t = Tiny::new();
    t.pretrain_cfg(&json!({"lr": 1e300, "epochs": 3}));
    let data = t.gen_data();
    let out = courier(&["pretrain", "--config", s(&t.p("pretrain.json")), "--data", s(&data), "--out", s(&t.p("p"))]);
    assert_eq!(code(&out), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

fn load_table(out: &Path) -> AblationTable {
    serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap()
}

#[test]
fn single_cell_grid_has_zero_deltas_and_caches() {
    let t = Tiny::new();
    let grid = write(
        &t.p("grid.json"),
        &json!({"pipeline": "pipeline.json", "cells": [{"variant": "full", "image_mode": "clusterid"}]}),
    );
    let out = t.p("ablate");
    ok(&["ablate", "--config", s(&grid), "--out", s(&out)]);
    let table = load_table(&out);
    assert_eq!(table.cells.len(), 1);
    let d = table.cells[0].delta.as_ref().unwrap();
    assert_eq!((d.auc, d.gauc, d.ndcg10), (0.0, 0.0, 0.0));
    assert!(!table.cells[0].computed.is_empty());
    assert!(std::fs::read_to_string(out.join("ablation.txt")).unwrap().contains("clusterid"));

    let manifests: Vec<PathBuf> = courier_cli::ablate::manifests(&out).into_keys().collect();
    let digests: Vec<String> = manifests.iter().map(|m| sha256_file(m).unwrap()).collect();
    ok(&["ablate", "--config", s(&grid), "--out", s(&out)]);
    let table2 = load_table(&out);
    assert!(table2.cells[0].computed.is_empty(), "{:?}", table2.cells[0].computed);
    assert_eq!(table2.cells[0].metrics, table.cells[0].metrics);
    let after: Vec<String> = manifests.iter().map(|m| sha256_file(m).unwrap()).collect();
    assert_eq!(digests, after);
}

#[test]
fn failed_cell_is_marked_and_exit_is_nonzero() {
    let t = Tiny::new();
    write(&t.p("cluster.json"), &json!({"k": 100000}));
    let grid = write(
        &t.p("grid.json"),
        &json!({"pipeline": "pipeline.json", "cells": [
            {"variant": "full", "image_mode": "none"},
            {"variant": "full", "image_mode": "clusterid"}
        ]}),
    );
    let out = t.p("ablate");
    let res = courier(&["ablate", "--config", s(&grid), "--out", s(&out)]);
    assert_ne!(code(&res), Some(0));
    let table = load_table(&out);
    assert_eq!(table.cells[0].status, "ok");
    assert_eq!(table.cells[1].status, "FAILED");
    assert!(table.cells[1].error.is_some());
    assert!(std::fs::read_to_string(out.join("ablation.txt")).unwrap().contains("FAILED"));
}
