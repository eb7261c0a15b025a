//! Experiment configs, runners and run comparison.
//!
//! A run is described by a strictly parsed TOML [`ExperimentConfig`] and
//! writes everything into one directory: the canonical config echo, CSV
//! telemetry, JSONL step logs, binary checkpoints and a text
//! [`RunManifest`] with a SHA-256 hash per artifact. Failed invariant
//! assertions are named in the manifest and make the exit status nonzero.

mod compare;
mod config;
mod manifest;
mod run;
mod training;

pub use compare::{
    compare_runs, tail_stats, ComparisonReport, Metric, PairComparison, TailStats, MIN_ROWS,
};
pub use config::{
    parse_config, CostConfig, ExperimentConfig, ExperimentKind, MotionCatConfig, PcgradConfig,
    TheoryConfig, OUT_ROOT_ENV,
};
pub use manifest::{sha256_file, Artifact, RunManifest, MANIFEST_FILE};
pub use run::{run_experiment, visual_attention_macs, CLOSED_FORM_TOL, FLOP_RATIO_TOL};
pub use training::{
    run_training, validation_batches, DataConfig, RunSinks, TrainOutcome, TrainRunConfig,
    VALIDATION_ID_BASE,
};

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::telemetry::TelemetryError;
use crate::theory::TheoryError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
