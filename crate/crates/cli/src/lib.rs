//! The `courier` pipeline: reproducible stages with JSON configs and
//! digest-carrying manifests, plus an ablation harness.

pub mod ablate;
pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use courier_core::downstream::CtrConfig;
use courier_core::quantize::ClusterConfig;
use courier_core::synth::DataConfig;
use courier_core::trainer::PretrainConfig;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "courier", version, about = "Pre-train item embeddings from click histories and evaluate them in a CTR model")]
pub struct Cli {
    /// Log per-epoch progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Stage config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rerun even when the manifest says the outputs are current.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic catalog and train/test sessions.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the item encoder and export embeddings.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Objective variant: full, no_ucs, no_contrast, no_reconstruction, no_neg_pv, small_batch.
        #[arg(long)]
        variant: Option<String>,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Cluster exported embeddings with k-means.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Embedding TSV written by pretrain.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// gen-data directory; adds the shared-characteristic report.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the CTR model.
    CtrTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// none, vector, simscore or clusterid.
        #[arg(long)]
        image_mode: Option<String>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Cluster map TSV written by cluster.
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Score the test sessions and write a metrics report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Report path; its manifest goes next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
        model: Option<PathBuf>,
        /// JSON lines of {"session_id", "scores"} instead of a model.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Pre-training log; adds alignment and uniformity to the report.
        #[arg(long)]
        train_log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Run a grid of variants and image modes and tabulate deltas.
    Ablate {
        /// Grid file (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every cell's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg: DataConfig = config::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            stages::gen_data(&cfg, &common.out, common.force)?;
        }
        Command::Pretrain {
            common,
            data,
            variant,
            resume,
        } => {
            let mut cfg: PretrainConfig = config::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            cfg.validate()?;
            courier_core::objective::ObjectiveRegistry::builtin().get(&cfg.variant)?;
            stages::pretrain(&cfg, &data, &common.out, resume.as_deref(), common.force)?;
        }
        Command::Cluster {
            common,
            embeddings,
            k,
            data,
        } => {
            let mut cfg: ClusterConfig = config::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            let catalog = data.map(|d| d.join(courier_core::synth::CATALOG_FILE));
            stages::cluster(&cfg, &embeddings, catalog.as_deref(), &common.out, common.force)?;
        }
        Command::CtrTrain {
            common,
            data,
            image_mode,
            embeddings,
            clusters,
        } => {
            let mut cfg: CtrConfig = config::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(m) = image_mode {
                cfg.image_mode = m;
            }
            cfg.validate()?;
            stages::ctr_train(
                &cfg,
                &data,
                &common.out,
                embeddings.as_deref(),
                clusters.as_deref(),
                common.force,
            )?;
        }
        Command::Eval {
            data,
            report,
            model,
            scores,
            train_log,
            seed,
            force,
        } => {
            let scorer = match (&model, &scores) {
                (Some(m), None) => stages::Scorer::Model(m),
                (None, Some(s)) => stages::Scorer::Scores(s),
                _ => return Err(CliError::Config("pass exactly one of --model and --scores".into())),
            };
            stages::eval(scorer, &data, &report, train_log.as_deref(), seed, force)?;
        }
        Command::Ablate {
            config,
            out,
            seed,
            force,
        } => {
            ablate::ablate(&config, &out, seed, force)?;
        }
    }
    Ok(())
}
