use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::data::SynthConfig;
use crate::model::{
    init_model, write_checkpoint, Batch, DenoiserParams, DiffusionSchedule, ModelConfig,
};
use crate::telemetry::{
    measure_checkpoint, write_telemetry_header, write_telemetry_row, MeasureSpec, TelemetryRecord,
};
use crate::tensor::{streams, RngStream};
use crate::train::{
    BatchSource, OptConfig, StepRecord, SwitchConfig, TrainMode, Trainer, TrainerConfig,
};

/// First id of the held-out validation subjects and clips.
pub const VALIDATION_ID_BASE: u64 = 1 << 40;

/// Corpus sizes, batch composition and measurement sharding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_subjects: u64,
    pub train_videos: u64,
    /// Frames per training and validation clip.
    pub frames: usize,
    pub identity_batch: usize,
    pub motion_batch: usize,
    pub val_identity: usize,
    pub val_motion: usize,
    /// Simulated data-parallel shards used by telemetry.
    pub shards: usize,
    pub diffusion_steps: usize,
    /// Stop with an error after this many passes over a pool; unlimited
    /// when absent.
    pub max_epochs: Option<usize>,
    /// Checkpoint save interval in steps; 0 disables checkpoints.
    pub save_every: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_subjects: 64,
            train_videos: 32,
            frames: 5,
            identity_batch: 8,
            motion_batch: 2,
            val_identity: 8,
            val_motion: 2,
            shards: 2,
            diffusion_steps: 50,
            max_epochs: None,
            save_every: 50,
        }
    }
}

/// Everything a training run needs besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub mode: TrainMode,
    pub buffer_capacity: usize,
    pub switch: SwitchConfig,
    /// Fields left out of an `[opt]` table keep the toy defaults.
    #[serde(deserialize_with = "opt_over_toy")]
    pub opt: OptConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Switching,
            buffer_capacity: 4,
            switch: SwitchConfig::default(),
            opt: OptConfig::toy(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptPatch {
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    weight_decay: Option<f64>,
    warmup: Option<u64>,
    restart_period: Option<u64>,
    clip: Option<f64>,
}

fn opt_over_toy<'de, D: serde::Deserializer<'de>>(d: D) -> Result<OptConfig, D::Error> {
    let p = OptPatch::deserialize(d)?;
    let t = OptConfig::toy();
    Ok(OptConfig {
        lr: p.lr.unwrap_or(t.lr),
        beta1: p.beta1.unwrap_or(t.beta1),
        beta2: p.beta2.unwrap_or(t.beta2),
        eps: p.eps.unwrap_or(t.eps),
        weight_decay: p.weight_decay.unwrap_or(t.weight_decay),
        warmup: p.warmup.unwrap_or(t.warmup),
        restart_period: p.restart_period.unwrap_or(t.restart_period),
        clip: p.clip.unwrap_or(t.clip),
    })
}

/// In-memory result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub telemetry: Vec<TelemetryRecord>,
    pub steps: Vec<StepRecord>,
    pub base_fingerprint_before: String,
    pub base_fingerprint_after: String,
    pub params: DenoiserParams,
}

/// Fixed held-out batches, disjoint from training ids.
pub fn validation_batches(
    cfg: &TrainRunConfig,
    seed: u64,
) -> Result<(Batch, Batch), ExperimentError> {
    let val_seed = RngStream::new(seed, streams::MEASURE).child(1).seed();
    let pairs = (0..cfg.data.val_identity as u64)
        .map(|i| cfg.synth.subject_pair(val_seed, VALIDATION_ID_BASE + i))
        .collect::<Result<Vec<_>, _>>()?;
    let videos = (0..cfg.data.val_motion as u64)
        .map(|i| {
            let s = RngStream::new(val_seed, streams::DATA)
                .child(VALIDATION_ID_BASE + i)
                .seed();
            cfg.synth.video(s, cfg.data.frames)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((Batch::Identity(pairs), Batch::Motion(videos)))
}

/// Output sinks for a run; all optional so the runner can be used in memory.
#[derive(Default)]
pub struct RunSinks<'a> {
    pub telemetry_csv: Option<&'a mut dyn Write>,
    pub step_log: Option<&'a mut dyn Write>,
    /// Directory receiving `checkpoint_<step>.bin`.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Trains from a fresh initialization, measuring gradient telemetry at
/// step 0 and after every `cadence` updates.
pub fn run_training(
    cfg: &TrainRunConfig,
    seed: u64,
    mut sinks: RunSinks<'_>,
) -> Result<TrainOutcome, ExperimentError> {
    let schedule = DiffusionSchedule::cosine(cfg.data.diffusion_steps)?;
    let params = init_model(&cfg.model, seed)?;
    let base_before = params.base_fingerprint();
    let mut img = BatchSource::identity(
        &cfg.synth,
        seed,
        0..cfg.data.train_subjects,
        cfg.data.identity_batch,
        cfg.data.max_epochs,
    )?;
    let mut vid = BatchSource::motion(
        &cfg.synth,
        seed,
        0..cfg.data.train_videos,
        cfg.data.frames,
        cfg.data.motion_batch,
        cfg.data.max_epochs,
    )?;
    let (val_img, val_vid) = validation_batches(cfg, seed)?;
    let spec = MeasureSpec {
        val_img,
        val_vid,
        opts: cfg.switch.measure_options(),
        schedule: schedule.clone(),
        seed: RngStream::new(seed, streams::MEASURE).seed(),
        shards: cfg.data.shards,
    };
    let mut trainer = Trainer::new(
        params,
        TrainerConfig {
            switch: cfg.switch.clone(),
            opt: cfg.opt.clone(),
            mode: cfg.mode,
            buffer_capacity: cfg.buffer_capacity,
            seed,
        },
        schedule,
    )?;

    if let Some(w) = sinks.telemetry_csv.as_deref_mut() {
        write_telemetry_header(w)?;
    }
    let mut telemetry = Vec::new();
    let mut steps = Vec::new();
    let mut measure =
        |trainer: &Trainer, sinks: &mut RunSinks<'_>| -> Result<(), ExperimentError> {
            let rec = measure_checkpoint(
                trainer.params(),
                trainer.loss_model(),
                &spec,
                trainer.step(),
            )?;
            if let Some(w) = sinks.telemetry_csv.as_deref_mut() {
                write_telemetry_row(w, &rec)?;
            }
            telemetry.push(rec);
            Ok(())
        };
    measure(&trainer, &mut sinks)?;
    for _ in 0..cfg.switch.max_steps {
        let rec = trainer.train_step(&mut img, &mut vid)?;
        if let Some(w) = sinks.step_log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        steps.push(rec);
        let done = trainer.step();
        if done % cfg.switch.cadence == 0 {
            measure(&trainer, &mut sinks)?;
        }
        if let Some(dir) = sinks.checkpoint_dir {
            if cfg.data.save_every > 0 && done % cfg.data.save_every == 0 {
                let f = File::create(dir.join(format!("checkpoint_{done:06}.bin")))?;
                let mut w = BufWriter::new(f);
                write_checkpoint(trainer.params(), done, &mut w)?;
                w.flush()?;
            }
        }
    }
    let params = trainer.into_params();
    Ok(TrainOutcome {
        telemetry,
        steps,
        base_fingerprint_after: params.base_fingerprint(),
        base_fingerprint_before: base_before,
        params,
    })
}
