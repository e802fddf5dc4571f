//! Runs a grid of (variant, image mode, seed) cells through the pipeline,
//! reusing every stage whose manifest is still valid, and tabulates metric
//! deltas against a baseline cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use courier_core::downstream::{CtrConfig, ImageArtifact, ImageModeRegistry, MetricsReport};
use courier_core::quantize::ClusterConfig;
use courier_core::synth::{DataConfig, CATALOG_FILE};
use courier_core::trainer::{PretrainConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::config::{self, resolve, ExperimentGrid, GridCell, PipelineConfig};
use crate::error::{CliError, Result};
use crate::stages::{self, Scorer, MANIFEST_FILE, REPORT_FILE, TRAIN_LOG_FILE};

pub const TABLE_JSON: &str = "ablation.json";
pub const TABLE_TEXT: &str = "ablation.txt";

/// Stage configs of a pipeline, before per-cell overrides.
#[derive(Clone, Debug)]
pub struct BaseConfigs {
    pub seed: u64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub cluster: ClusterConfig,
    pub ctr: CtrConfig,
}

impl BaseConfigs {
    pub fn load(pipeline: &Path) -> Result<Self> {
        let (p, base) = PipelineConfig::load(pipeline)?;
        Ok(Self {
            seed: p.seed,
            data: config::load(&resolve(&base, &p.data))?,
            pretrain: config::load(&resolve(&base, &p.pretrain))?,
            cluster: config::load(&resolve(&base, &p.cluster))?,
            ctr: config::load(&resolve(&base, &p.ctr))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub auc: f64,
    pub gauc: f64,
    pub ndcg10: f64,
}

impl CellMetrics {
    fn minus(&self, base: &Self) -> Self {
        Self {
            auc: self.auc - base.auc,
            gauc: self.gauc - base.gauc,
            ndcg10: self.ndcg10 - base.ndcg10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub image_mode: String,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CellMetrics>,
    /// Absolute differences from the baseline cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<CellMetrics>,
    /// Final-epoch uniformity of the pre-trained encoder, when one was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniformity: Option<f64>,
    pub report: Option<PathBuf>,
    /// Stages that actually ran (the rest were reused).
    pub computed: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline: usize,
    pub cells: Vec<CellResult>,
}

impl AblationTable {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status != "ok").count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:<10} {:>5} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>10}",
            "variant", "mode", "seed", "auc", "gauc", "ndcg10", "d_auc", "d_gauc", "d_ndcg10", "uniformity"
        );
        let pct = |x: f64| format!("{:+.2}%", 100.0 * x);
        for (i, c) in self.cells.iter().enumerate() {
            let name = if i == self.baseline {
                format!("{} *", c.variant)
            } else {
                c.variant.clone()
            };
            match (&c.metrics, &c.delta) {
                (Some(m), d) => {
                    let (da, dg, dn) = d
                        .as_ref()
                        .map(|d| (pct(d.auc), pct(d.gauc), pct(d.ndcg10)))
                        .unwrap_or_else(|| ("-".into(), "-".into(), "-".into()));
                    let u = c.uniformity.map_or("-".into(), |u| format!("{u:.4}"));
                    let _ = writeln!(
                        s,
                        "{:<20} {:<10} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>9} {:>9} {:>9} {:>10}",
                        name, c.image_mode, c.seed, m.auc, m.gauc, m.ndcg10, da, dg, dn, u
                    );
                }
                (None, _) => {
                    let _ = writeln!(
                        s,
                        "{:<20} {:<10} {:>5} FAILED: {}",
                        name,
                        c.image_mode,
                        c.seed,
                        c.error.as_deref().unwrap_or("unknown error")
                    );
                }
            }
        }
        let _ = writeln!(s, "* baseline; deltas are absolute differences in percentage points");
        s
    }
}

struct CellOk {
    report: MetricsReport,
    report_path: PathBuf,
    uniformity: Option<f64>,
    computed: Vec<String>,
}

fn run_cell(base: &BaseConfigs, cell: &GridCell, seed: u64, out: &Path, force: bool) -> Result<CellOk> {
    let mode = ImageModeRegistry::builtin().get(&cell.image_mode)?;
    let needs = mode.requires();
    let mut computed = Vec::new();
    let mut note = |o: &crate::manifest::StageOutcome, name: String| {
        if !o.skipped {
            computed.push(name);
        }
    };

    let data_cfg = DataConfig {
        seed,
        ..base.data.clone()
    };
    let data_dir = out.join("data").join(format!("seed-{seed}"));
    let o = stages::gen_data(&data_cfg, &data_dir, force)?;
    note(&o, "gen-data".into());

    let mut embeddings = None;
    let mut clusters = None;
    let mut train_log = None;
    if !needs.is_empty() {
        let cfg = PretrainConfig {
            seed,
            variant: cell.variant.clone(),
            ..base.pretrain.clone()
        };
        let dir = out.join("pretrain").join(format!("{}-seed-{seed}", cell.variant));
        let o = stages::pretrain(&cfg, &data_dir, &dir, None, force)?;
        note(&o, format!("pretrain[{}]", cell.variant));
        embeddings = Some(o.output("embeddings"));
        train_log = Some(dir.join(TRAIN_LOG_FILE));
        if needs.contains(&ImageArtifact::ClusterMap) {
            let cfg = ClusterConfig {
                seed,
                ..base.cluster.clone()
            };
            let cdir = out.join("cluster").join(format!("{}-seed-{seed}", cell.variant));
            let catalog = data_dir.join(CATALOG_FILE);
            let o = stages::cluster(&cfg, embeddings.as_deref().unwrap(), Some(&catalog), &cdir, force)?;
            note(&o, "cluster".into());
            clusters = Some(o.output("cluster_map"));
        }
    }
    let uses_embeddings = needs.contains(&ImageArtifact::Embeddings);
    let ctr_cfg = CtrConfig {
        seed,
        image_mode: cell.image_mode.clone(),
        ..base.ctr.clone()
    };
    // Cells without image features do not depend on the variant.
    let tag = if needs.is_empty() {
        format!("{}-seed-{seed}", cell.image_mode)
    } else {
        format!("{}-{}-seed-{seed}", cell.variant, cell.image_mode)
    };
    let ctr_dir = out.join("ctr").join(&tag);
    let o = stages::ctr_train(
        &ctr_cfg,
        &data_dir,
        &ctr_dir,
        if uses_embeddings { embeddings.as_deref() } else { None },
        clusters.as_deref(),
        force,
    )?;
    note(&o, format!("ctr-train[{}]", cell.image_mode));
    let report_path = ctr_dir.join(REPORT_FILE);
    let o = stages::eval(
        Scorer::Model(&o.output("model")),
        &data_dir,
        &report_path,
        train_log.as_deref(),
        None,
        force,
    )?;
    note(&o, "eval".into());
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
    let uniformity = match &train_log {
        Some(p) => {
            let log: TrainLog = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            log.epochs.last().map(|e| e.uniformity)
        }
        None => None,
    };
    Ok(CellOk {
        report,
        report_path,
        uniformity,
        computed,
    })
}

/// Runs every cell and writes `ablation.json` and `ablation.txt` into `out`.
/// A failing cell is recorded and the grid carries on.
pub fn ablate(
    grid_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
    force: bool,
) -> Result<AblationTable> {
    let grid: ExperimentGrid = config::load(grid_path)?;
    grid.validate()?;
    let base_dir = grid_path.parent().unwrap_or(Path::new("."));
    let base = BaseConfigs::load(&resolve(base_dir, &grid.pipeline))?;
    std::fs::create_dir_all(out)?;

    let mut cells = Vec::with_capacity(grid.cells.len());
    let mut first_code = None;
    for cell in &grid.cells {
        let seed = seed_override.or(cell.seed).unwrap_or(base.seed);
        println!("ablate: cell {} / {} / seed {seed}", cell.variant, cell.image_mode);
        let result = match run_cell(&base, cell, seed, out, force) {
            Ok(ok) => CellResult {
                variant: cell.variant.clone(),
                image_mode: cell.image_mode.clone(),
                seed,
                status: "ok".into(),
                error: None,
                metrics: Some(CellMetrics {
                    auc: ok.report.auc,
                    gauc: ok.report.gauc,
                    ndcg10: ok.report.ndcg10,
                }),
                delta: None,
                uniformity: ok.uniformity,
                report: Some(ok.report_path),
                computed: ok.computed,
            },
            Err(e) => {
                eprintln!("ablate: cell {} / {} FAILED: {e}", cell.variant, cell.image_mode);
                first_code.get_or_insert(e.exit_code());
                CellResult {
                    variant: cell.variant.clone(),
                    image_mode: cell.image_mode.clone(),
                    seed,
                    status: "FAILED".into(),
                    error: Some(e.to_string()),
                    metrics: None,
                    delta: None,
                    uniformity: None,
                    report: None,
                    computed: Vec::new(),
                }
            }
        };
        cells.push(result);
    }
    if let Some(b) = cells[grid.baseline].metrics.clone() {
        for c in &mut cells {
            c.delta = c.metrics.as_ref().map(|m| m.minus(&b));
        }
    }
    let table = AblationTable {
        baseline: grid.baseline,
        cells,
    };
    stages::write_json(&out.join(TABLE_JSON), &table)?;
    let text = table.to_text();
    std::fs::write(out.join(TABLE_TEXT), &text)?;
    print!("{text}");
    let failed = table.failed();
    if failed > 0 {
        return Err(CliError::CellsFailed {
            failed,
            total: table.cells.len(),
            code: first_code.unwrap_or(1),
        });
    }
    Ok(table)
}

/// Manifest of every stage directory under an ablation output, by path.
pub fn manifests(out: &Path) -> BTreeMap<PathBuf, crate::manifest::RunManifest> {
    let mut found = BTreeMap::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else {
            continue;
        };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(MANIFEST_FILE)) {
                if let Ok(m) = crate::manifest::RunManifest::load(&p) {
                    found.insert(p, m);
                }
            }
        }
    }
    found
}
