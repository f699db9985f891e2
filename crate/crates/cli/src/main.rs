//! `vrel` command-line pipeline: synthetic data, feature fitting,
//! featurization, training, scoring and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vrel::eval::{DetectionMode, Localization};

use config::Config;

#[derive(Debug, Parser)]
#[command(name = "vrel", version, about = "Visual relation classifiers from full or weak supervision")]
pub struct Cli {
    /// Seed for every randomized stage.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Skip candidate filtering; every detection pairs with every other.
    #[arg(long, global = true)]
    pub prefiltered: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    PlantedBags,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Split tag; all images when omitted.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Featurized pairs of the training split.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Model file holding the GMM and PCA used for featurization; copied
    /// into the output so it is self-contained.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    Synth {
        #[arg(long, value_enum)]
        preset: Preset,
        /// Output folder for the manifest and its files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the spatial GMM on candidate pairs.
    FitGmm {
        #[command(flatten)]
        data: DataArgs,
        /// Number of components.
        #[arg(long)]
        k: Option<usize>,
        /// Fit on annotated box pairs only instead of all candidates.
        #[arg(long)]
        annotated: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the appearance PCA on detection features.
    FitPca {
        #[command(flatten)]
        data: DataArgs,
        /// Output size per detection.
        #[arg(long)]
        dim: Option<usize>,
        /// Model file to extend (for instance the GMM); a new one otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build candidate pairs and their descriptors.
    Featurize {
        #[command(flatten)]
        data: DataArgs,
        /// Model file holding the GMM and PCA.
        #[arg(long)]
        model: PathBuf,
        /// Use the annotated box pairs instead of detector candidates.
        #[arg(long)]
        gt_pairs: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ridge regression on box-level annotations.
    TrainFull(TrainArgs),
    /// Weakly supervised training from image-level annotations.
    TrainWeak {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Baseline: one random pair per bag taken as the positive.
    TrainNoisy(TrainArgs),
    /// Grid search of the triplet score weights on a validation split.
    TuneWeights {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Language score table (CSV).
        #[arg(long)]
        language: Option<PathBuf>,
        /// Model file with the chosen weights.
        #[arg(long)]
        out: PathBuf,
        /// Per-cell recall as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score candidate pairs into ranked triplet predictions (JSON lines).
    Score {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        language: Option<PathBuf>,
        /// Predicates per pair.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@x of predictions against box-level annotations.
    EvalRecall {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        x: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DetectionMode>,
        #[arg(long)]
        iou: Option<f64>,
        /// Report JSON; printed to stdout as a table either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Triplet-query retrieval mAP over featurized pairs.
    EvalRetrieval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        language: Option<PathBuf>,
        #[arg(long, value_parser = parse_localization)]
        localization: Option<Localization>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<DetectionMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown mode '{s}' (predicate, phrase, relationship)"))
}

fn parse_localization(s: &str) -> Result<Localization, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown localization '{s}' (gt, union, subj, subj-obj)"))
}

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(vrel::Error),
}

impl From<vrel::Error> for Failure {
    fn from(e: vrel::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let config = match Config::load(cli.config.as_deref()) {
        Ok(c) => Config {
            prefiltered: c.prefiltered || cli.prefiltered,
            ..c.with_seed(cli.seed)
        },
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
