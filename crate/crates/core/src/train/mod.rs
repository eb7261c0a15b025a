//! Training engine: stochastic task switching, AdamW with decoupled weight
//! decay on a warmup + cosine-with-restarts schedule, and PCGrad in plain
//! and buffered forms.

mod optim;
mod pcgrad;
mod source;
mod trainer;

pub use optim::{lr_at, optimizer_step, OptConfig, OptState, UpdateInfo};
pub use pcgrad::{combine_pcgrad, pcgrad_project, PCGradBuffer, PCGRAD_EPS};
pub use source::BatchSource;
pub use trainer::{flat_gradient, StepRecord, TrainMode, Trainer, TrainerConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FrameMode};
use crate::model::{LossOptions, ModelError, TaskKind};
use crate::telemetry::TelemetryError;
use crate::tensor::{RngStream, TensorError};
use crate::theory::TheoryError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    Numerical { step: u64, what: String },
    #[error("degenerate gradient: zero norm input")]
    DegenerateGradient,
    #[error("invariant violated at step {step}: {detail}")]
    Invariant { step: u64, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Task mixing and regularizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchConfig {
    /// Probability of a motion step. Not part of the serialized form: the
    /// experiment config carries it once, at the top level.
    #[serde(skip)]
    pub p: f64,
    pub p_drop: f64,
    pub frame_mode: FrameMode,
    pub cls_slot: bool,
    /// Whole-reference drop on identity samples during training.
    pub view_drop: f64,
    pub max_steps: u64,
    /// Telemetry cadence `K`.
    pub cadence: u64,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            p: 0.2,
            p_drop: 0.5,
            frame_mode: FrameMode::Random,
            cls_slot: true,
            view_drop: 0.5,
            max_steps: 1000,
            cadence: 50,
        }
    }
}

impl SwitchConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("p", self.p),
            ("p_drop", self.p_drop),
            ("view_drop", self.view_drop),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.cadence == 0 {
            return Err(TrainError::Config("cadence must be at least 1".into()));
        }
        Ok(())
    }

    /// Loss options used by training steps.
    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            p_drop: self.p_drop,
            frame_mode: self.frame_mode,
            cls_slot: self.cls_slot,
            view_drop: self.view_drop,
        }
    }

    /// Loss options used by telemetry: same regularizers, no whole-view drop.
    pub fn measure_options(&self) -> LossOptions {
        LossOptions {
            view_drop: 0.0,
            ..self.loss_options()
        }
    }
}

/// Draws `u ~ U[0, 1)` and picks motion iff `u < p`.
pub fn switch_task(rng: &mut RngStream, p: f64) -> TaskKind {
    if rng.uniform() < p {
        TaskKind::Motion
    } else {
        TaskKind::Identity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switching_extremes_and_rate() {
        let mut rng = RngStream::new(3, 1);
        assert!((0..1000).all(|_| switch_task(&mut rng, 0.0) == TaskKind::Identity));
        assert!((0..1000).all(|_| switch_task(&mut rng, 1.0) == TaskKind::Motion));
        let n = 100_000;
        let motion = (0..n)
            .filter(|_| switch_task(&mut rng, 0.2) == TaskKind::Motion)
            .count();
        assert!((motion as f64 / n as f64 - 0.2).abs() < 0.005);
    }

    #[test]
    fn config_ranges() {
        assert!(SwitchConfig::default().validate().is_ok());
        let bad = SwitchConfig {
            p: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(m)) if m.contains("p = 1.5")));
        let bad = SwitchConfig {
            cadence: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
