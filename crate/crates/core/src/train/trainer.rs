use serde::{Deserialize, Serialize};

use super::optim::{optimizer_step, OptConfig, OptState};
use super::pcgrad::{combine_pcgrad, pcgrad_project, PCGradBuffer};
use super::source::BatchSource;
use super::{switch_task, SwitchConfig, TrainError};
use crate::model::{
    prepare_batch, Batch, DenoiserParams, DiffusionSchedule, LossModel, TaskKind, VPredictionLoss,
};
use crate::telemetry::flatten;
use crate::tensor::{streams, Gradients, RngStream};
use crate::theory::pcgrad_mixture_gap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One sampled task per step.
    #[default]
    Switching,
    /// Both gradients every step, projected and mixed.
    Pcgrad,
    /// One sampled gradient per step, projected against the most recent
    /// gradient of the other task held in a FIFO.
    PcgradBuffered,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Switching => "switching",
            TrainMode::Pcgrad => "pcgrad",
            TrainMode::PcgradBuffered => "pcgrad_buffered",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub switch: SwitchConfig,
    pub opt: OptConfig,
    pub mode: TrainMode,
    pub buffer_capacity: usize,
    pub seed: u64,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    /// `identity`, `motion`, or `both`.
    pub task: &'static str,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub mode: TrainMode,
    /// A conflicting pair was projected.
    pub projected: bool,
    /// Buffered mode applied the raw gradient because the other task was
    /// absent from the buffer.
    pub fallback: bool,
}

/// Concatenates gradients in trainable-index order.
pub fn flat_gradient(
    params: &DenoiserParams,
    grads: &Gradients,
    task: TaskKind,
) -> Result<Vec<f64>, TrainError> {
    Ok(flatten(grads, params.trainable_index(), task, 0)?.values)
}

/// Owns parameters and optimizer state and applies one update per step.
pub struct Trainer {
    cfg: TrainerConfig,
    params: DenoiserParams,
    opt: OptState,
    loss: VPredictionLoss,
    task_rng: RngStream,
    buffer: Option<PCGradBuffer>,
}

impl Trainer {
    pub fn new(
        params: DenoiserParams,
        cfg: TrainerConfig,
        schedule: DiffusionSchedule,
    ) -> Result<Self, TrainError> {
        cfg.switch.validate()?;
        let opt = OptState::new(cfg.opt.clone(), &params)?;
        let buffer = match cfg.mode {
            TrainMode::PcgradBuffered => Some(PCGradBuffer::new(cfg.buffer_capacity)?),
            _ => None,
        };
        Ok(Self {
            task_rng: RngStream::new(cfg.seed, streams::TASK_SWITCH),
            loss: VPredictionLoss { schedule },
            cfg,
            params,
            opt,
            buffer,
        })
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn into_params(self) -> DenoiserParams {
        self.params
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn loss_model(&self) -> &VPredictionLoss {
        &self.loss
    }

    /// Updates applied so far.
    pub fn step(&self) -> u64 {
        self.opt.step()
    }

    /// Mean loss and flat gradient of `batch` at the current parameters,
    /// with noise and regularizer draws keyed by `(seed, step, task)`.
    pub fn task_gradient(&self, batch: &Batch, step: u64) -> Result<(f64, Vec<f64>), TrainError> {
        let kind = batch.kind();
        let rng = RngStream::new(self.cfg.seed, streams::NOISE)
            .child(step)
            .child(kind as u64);
        let samples = prepare_batch(
            batch,
            &self.cfg.switch.loss_options(),
            &self.loss.schedule,
            &rng,
        )?;
        let (loss, grads) = self.loss.batch_loss(&self.params, &samples)?;
        if !loss.is_finite() {
            return Err(TrainError::Numerical {
                step,
                what: format!("{} loss", kind.name()),
            });
        }
        Ok((loss, flat_gradient(&self.params, &grads, kind)?))
    }

    /// Switching-mode update direction without applying it: draws the task
    /// and returns that task's gradient on the given fixed batches.
    pub fn sample_direction(
        &mut self,
        img: &Batch,
        vid: &Batch,
    ) -> Result<(TaskKind, Vec<f64>), TrainError> {
        let task = switch_task(&mut self.task_rng, self.cfg.switch.p);
        let batch = if task == TaskKind::Motion { vid } else { img };
        let (_, g) = self.task_gradient(batch, self.step())?;
        Ok((task, g))
    }

    pub fn train_step(
        &mut self,
        img: &mut BatchSource,
        vid: &mut BatchSource,
    ) -> Result<StepRecord, TrainError> {
        self.step_inner(img, vid, None)
    }

    /// Like [`train_step`](Self::train_step) but with the task fixed instead
    /// of sampled. Ignored in plain PCGrad mode, which uses both tasks.
    pub fn train_step_as(
        &mut self,
        task: TaskKind,
        img: &mut BatchSource,
        vid: &mut BatchSource,
    ) -> Result<StepRecord, TrainError> {
        self.step_inner(img, vid, Some(task))
    }

    fn step_inner(
        &mut self,
        img: &mut BatchSource,
        vid: &mut BatchSource,
        forced: Option<TaskKind>,
    ) -> Result<StepRecord, TrainError> {
        if img.kind() != TaskKind::Identity || vid.kind() != TaskKind::Motion {
            return Err(TrainError::Config(
                "sources must be (identity, motion)".into(),
            ));
        }
        let step = self.step();
        let p = self.cfg.switch.p;
        let mut projected = false;
        let mut fallback = false;
        let (task, loss, direction) = match self.cfg.mode {
            TrainMode::Switching | TrainMode::PcgradBuffered => {
                let task = forced.unwrap_or_else(|| switch_task(&mut self.task_rng, p));
                let batch = match task {
                    TaskKind::Identity => img.next_batch()?,
                    TaskKind::Motion => vid.next_batch()?,
                };
                let (loss, g) = self.task_gradient(&batch, step)?;
                let dir = match self.buffer.as_mut() {
                    None => g,
                    Some(buf) => {
                        buf.push(task, g.clone());
                        match (buf.latest(TaskKind::Identity), buf.latest(TaskKind::Motion)) {
                            (Some(gi), Some(gv)) => {
                                let (d, conflict) = combine_pcgrad(gi, gv, p)?;
                                projected = conflict;
                                d
                            }
                            _ => {
                                fallback = true;
                                g
                            }
                        }
                    }
                };
                (task.name(), loss, dir)
            }
            TrainMode::Pcgrad => {
                let (li, gi) = self.task_gradient(&img.next_batch()?, step)?;
                let (lv, gv) = self.task_gradient(&vid.next_batch()?, step)?;
                self.check_projection(step, &gi, &gv)?;
                let (d, conflict) = combine_pcgrad(&gi, &gv, p)?;
                projected = conflict;
                ("both", (1.0 - p) * li + p * lv, d)
            }
        };
        let info = optimizer_step(&mut self.params, &direction, &mut self.opt)?;
        Ok(StepRecord {
            step,
            task,
            loss,
            lr: info.lr,
            grad_norm: info.grad_norm,
            mode: self.cfg.mode,
            projected,
            fallback,
        })
    }

    /// Live checks: the PCGrad/mixture gap stays within its bound and the
    /// projected gradients no longer conflict.
    fn check_projection(&self, step: u64, gi: &[f64], gv: &[f64]) -> Result<(), TrainError> {
        let (gap, bound) = pcgrad_mixture_gap(gi, gv, self.cfg.switch.p)?;
        if gap > bound * (1.0 + 1e-9) {
            return Err(TrainError::Invariant {
                step,
                detail: format!("pcgrad gap {gap:e} exceeds bound {bound:e}"),
            });
        }
        let (pi, pv) = pcgrad_project(gi, gv)?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let scale = (dot(gi, gi) * dot(gv, gv)).sqrt();
        if dot(&pi, gv) < -1e-9 * scale || dot(&pv, gi) < -1e-9 * scale {
            return Err(TrainError::Invariant {
                step,
                detail: "projected gradients still conflict".into(),
            });
        }
        Ok(())
    }
}
