//! Gradient measurement protocol and cost utilities.
//!
//! Task gradients are flattened in trainable-index order, averaged across
//! simulated data-parallel shards before any synchronization step, and
//! compared by cosine and norm at fixed checkpoints on fixed validation
//! batches. Also here: the attention step-cost model and the motion
//! categorizer.

mod cost;
mod flat;
mod measure;

pub use cost::{
    categorize_lines, categorize_motion, expected_step_cost, CostModel, MotionCategory,
    BACKGROUND_LIMIT, MEDIUM_MAX, SMALL_MAX,
};
pub use flat::{cosine, flatten, presync_aggregate, unflatten, FlatGradient, LayoutEntry};
pub use measure::{
    measure_checkpoint, parse_telemetry_csv, presync_gradient, write_telemetry_header,
    write_telemetry_row, GroupStats, MeasureSpec, TelemetryRecord, TelemetryRow, COSINE_EPS,
    GROUP_COLUMNS, NORM_FLOOR,
};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("parameters changed during measurement at step {0}")]
    FrozenMeasurement(u64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
