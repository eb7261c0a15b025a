use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{forward_on_tape, push_trainable};
use super::{
    add_noise, DenoiserParams, DiffusionSchedule, ForwardOptions, ForwardStats, ModelError,
};
use super::{Position, TokenKind, TokenSequence};
use crate::data::{
    drop_tokens, select_reference_frame, DropMask, FrameMode, SubjectPair, SyntheticVideo,
    TokenGrid,
};
use crate::tensor::{streams, Gradients, ParamId, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Identity,
    Motion,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Identity => "identity",
            TaskKind::Motion => "motion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Identity(Vec<SubjectPair>),
    Motion(Vec<SyntheticVideo>),
}

impl Batch {
    pub fn kind(&self) -> TaskKind {
        match self {
            Batch::Identity(_) => TaskKind::Identity,
            Batch::Motion(_) => TaskKind::Motion,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Batch::Identity(v) => v.len(),
            Batch::Motion(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Conditioning regularizers applied when a batch is turned into sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    /// Per-token drop probability for the motion task's reference frame.
    pub p_drop: f64,
    pub frame_mode: FrameMode,
    /// Prepend the learned `<CLS>` slot to identity prompts.
    pub cls_slot: bool,
    /// Probability of dropping the whole reference view on identity samples.
    pub view_drop: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            p_drop: 0.5,
            frame_mode: FrameMode::Random,
            cls_slot: true,
            view_drop: 0.5,
        }
    }
}

impl LossOptions {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("p_drop", self.p_drop), ("view_drop", self.view_drop)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::Domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One sample after all random choices are made.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub kind: TaskKind,
    pub seq: TokenSequence,
    pub timestep: usize,
    pub target: Arc<Tensor>,
    /// 1-based conditioning frame (motion samples).
    pub reference_frame: Option<usize>,
    pub mask: Option<DropMask>,
    pub view_dropped: bool,
}

/// `[noisy; reference; <CLS>?; text]` with reference tokens in the frame-1
/// conditioning slot at their original spatial positions.
pub fn build_sequence(
    noisy: &TokenGrid,
    noisy_positions: &[Position],
    reference: &TokenGrid,
    reference_spatial: &[usize],
    text: &TokenGrid,
    cls: bool,
) -> Result<TokenSequence, ModelError> {
    let d = noisy.dim();
    let cls_rows = usize::from(cls);
    let rows = noisy.rows() + reference.rows() + cls_rows + text.rows();
    let mut data = Vec::with_capacity(rows * d);
    data.extend_from_slice(noisy.data());
    data.extend_from_slice(reference.data());
    data.resize(data.len() + cls_rows * d, 0.0);
    data.extend_from_slice(text.data());
    let mut positions = noisy_positions.to_vec();
    positions.extend(
        reference_spatial
            .iter()
            .map(|&spatial| Position { frame: 1, spatial }),
    );
    positions.resize(
        positions.len() + cls_rows + text.rows(),
        Position {
            frame: 0,
            spatial: 0,
        },
    );
    let mut kinds = vec![TokenKind::NoisyVisual; noisy.rows()];
    kinds.resize(kinds.len() + reference.rows(), TokenKind::Reference);
    kinds.resize(kinds.len() + cls_rows, TokenKind::Cls);
    kinds.resize(kinds.len() + text.rows(), TokenKind::Text);
    let seq = TokenSequence {
        tokens: TokenGrid::new(rows, d, data)?,
        positions,
        kinds,
    };
    seq.validate()?;
    Ok(seq)
}

fn grid_tensor(grid: &TokenGrid) -> Result<Tensor, ModelError> {
    grid.to_tensor()?
        .ok_or_else(|| ModelError::Domain("empty denoising target".into()))
}

fn tensor_grid(t: &Tensor) -> Result<TokenGrid, ModelError> {
    Ok(TokenGrid::new(t.rows(), t.cols(), t.data().to_vec())?)
}

/// Independent per-sample streams derived from `rng`'s seed.
struct SampleStreams {
    noise: RngStream,
    frame: RngStream,
    drop: RngStream,
    view: RngStream,
}

impl SampleStreams {
    fn new(rng: &RngStream, index: usize) -> Self {
        let s = |id| RngStream::new(rng.seed(), id).child(index as u64);
        Self {
            noise: s(streams::NOISE),
            frame: s(streams::FRAME_SELECT),
            drop: s(streams::TOKEN_DROP),
            view: s(streams::VIEW_DROP),
        }
    }
}

/// Draws timesteps, noise and regularizer choices for every sample. Sample
/// `i` uses child `i` of each stream, so the result does not depend on how
/// the batch is later split.
pub fn prepare_batch(
    batch: &Batch,
    opts: &LossOptions,
    schedule: &DiffusionSchedule,
    rng: &RngStream,
) -> Result<Vec<PreparedSample>, ModelError> {
    opts.validate()?;
    if batch.is_empty() {
        return Err(ModelError::Domain("empty batch".into()));
    }
    let n_steps = schedule.num_steps();
    match batch {
        Batch::Identity(pairs) => pairs
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                let mut s = SampleStreams::new(rng, i);
                let t = s.noise.below(n_steps);
                let x0 = grid_tensor(&pair.target_tokens)?;
                let (xt, v) = add_noise(&x0, t, schedule, &mut s.noise)?;
                let view_dropped = s.view.uniform() < opts.view_drop;
                let n = pair.target_tokens.rows();
                let noisy_pos: Vec<Position> = (0..n)
                    .map(|j| Position {
                        frame: 1,
                        spatial: j,
                    })
                    .collect();
                let (reference, spatial) = if view_dropped {
                    (TokenGrid::empty(pair.ref_tokens.dim()), Vec::new())
                } else {
                    (
                        pair.ref_tokens.clone(),
                        (0..pair.ref_tokens.rows()).collect(),
                    )
                };
                let seq = build_sequence(
                    &tensor_grid(&xt)?,
                    &noisy_pos,
                    &reference,
                    &spatial,
                    &pair.prompt_embed,
                    opts.cls_slot && pair.cls_slot,
                )?;
                Ok(PreparedSample {
                    kind: TaskKind::Identity,
                    seq,
                    timestep: t,
                    target: Arc::new(v),
                    reference_frame: None,
                    mask: None,
                    view_dropped,
                })
            })
            .collect(),
        Batch::Motion(videos) => videos
            .iter()
            .enumerate()
            .map(|(i, video)| {
                let mut s = SampleStreams::new(rng, i);
                let (index, frame) = select_reference_frame(video, &mut s.frame, opts.frame_mode)?;
                let (kept, mask) = drop_tokens(frame, opts.p_drop, &mut s.drop)?;
                let spatial: Vec<usize> = mask
                    .keep
                    .iter()
                    .enumerate()
                    .filter(|(_, &k)| k)
                    .map(|(j, _)| j)
                    .collect();
                let t = s.noise.below(n_steps);
                let n = frame.rows();
                let d = frame.dim();
                let all: Vec<f64> = video
                    .frames
                    .iter()
                    .flat_map(|f| f.data().iter().copied())
                    .collect();
                let x0 = Tensor::new(vec![video.frame_count() * n, d], all)?;
                let (xt, v) = add_noise(&x0, t, schedule, &mut s.noise)?;
                let noisy_pos: Vec<Position> = (0..video.frame_count() * n)
                    .map(|r| Position {
                        frame: r / n + 1,
                        spatial: r % n,
                    })
                    .collect();
                let seq = build_sequence(
                    &tensor_grid(&xt)?,
                    &noisy_pos,
                    &kept,
                    &spatial,
                    &video.caption_embed,
                    false,
                )?;
                Ok(PreparedSample {
                    kind: TaskKind::Motion,
                    seq,
                    timestep: t,
                    target: Arc::new(v),
                    reference_frame: Some(index),
                    mask: Some(mask),
                    view_dropped: false,
                })
            })
            .collect(),
    }
}

/// Scalar loss of one prepared sample on `tape`.
pub(crate) fn sample_loss_on_tape(
    tape: &mut Tape,
    params: &DenoiserParams,
    vars: &[Var],
    sample: &PreparedSample,
    num_steps: usize,
    stats: &mut ForwardStats,
) -> Result<Var, ModelError> {
    let opts = ForwardOptions {
        adapters: true,
        num_steps,
    };
    let pred = forward_on_tape(
        tape,
        params,
        vars,
        &sample.seq,
        sample.timestep,
        opts,
        stats,
    )?;
    Ok(tape.mse(pred, sample.target.clone())?)
}

/// Something that maps prepared samples to a loss and its gradient over the
/// trainable index.
pub trait LossModel: Sync {
    fn sample_loss(
        &self,
        params: &DenoiserParams,
        sample: &PreparedSample,
    ) -> Result<(f64, Gradients), ModelError>;

    /// Batch mean of [`sample_loss`](Self::sample_loss). Samples run in
    /// parallel but are reduced in index order, so the result is
    /// deterministic.
    fn batch_loss(
        &self,
        params: &DenoiserParams,
        samples: &[PreparedSample],
    ) -> Result<(f64, Gradients), ModelError> {
        if samples.is_empty() {
            return Err(ModelError::Domain("empty batch".into()));
        }
        let parts: Vec<(f64, Gradients)> = samples
            .par_iter()
            .map(|s| self.sample_loss(params, s))
            .collect::<Result<_, _>>()?;
        let n = samples.len() as f64;
        let mut loss = 0.0;
        let mut acc: Vec<Vec<f64>> = params
            .trainable()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        for (l, g) in &parts {
            loss += l;
            check_frozen(params, g)?;
            for (i, slot) in acc.iter_mut().enumerate() {
                for (a, x) in slot.iter_mut().zip(g[&ParamId(i)].data()) {
                    *a += x;
                }
            }
        }
        let grads = acc
            .into_iter()
            .zip(params.trainable())
            .enumerate()
            .map(|(i, (v, t))| {
                Ok((
                    ParamId(i),
                    t.with_data(v.into_iter().map(|x| x / n).collect())?,
                ))
            })
            .collect::<Result<Gradients, ModelError>>()?;
        Ok((loss / n, grads))
    }
}

/// Gradients must cover exactly the trainable index.
fn check_frozen(params: &DenoiserParams, grads: &Gradients) -> Result<(), ModelError> {
    let n = params.trainable().len();
    if grads.len() != n || grads.keys().enumerate().any(|(i, k)| *k != ParamId(i)) {
        let extra: Vec<usize> = grads.keys().map(|k| k.0).filter(|&k| k >= n).collect();
        return Err(ModelError::FrozenViolation(format!(
            "gradient keys do not match the trainable index (unexpected: {extra:?})"
        )));
    }
    Ok(())
}

/// Mean-squared v-prediction error of the denoiser.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VPredictionLoss {
    pub schedule: DiffusionSchedule,
}

impl LossModel for VPredictionLoss {
    fn sample_loss(
        &self,
        params: &DenoiserParams,
        sample: &PreparedSample,
    ) -> Result<(f64, Gradients), ModelError> {
        let mut tape = Tape::new();
        let vars = push_trainable(&mut tape, params, true);
        let loss = sample_loss_on_tape(
            &mut tape,
            params,
            &vars,
            sample,
            self.schedule.num_steps(),
            &mut ForwardStats::default(),
        )?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }
}

impl VPredictionLoss {
    /// Batch loss on one tape over caller-supplied trainable leaves, for
    /// finite-difference checks.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &DenoiserParams,
        vars: &[Var],
        samples: &[PreparedSample],
    ) -> Result<Var, ModelError> {
        let mut total: Option<Var> = None;
        for s in samples {
            let l = sample_loss_on_tape(
                tape,
                params,
                vars,
                s,
                self.schedule.num_steps(),
                &mut ForwardStats::default(),
            )?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| ModelError::Domain("empty batch".into()))?;
        Ok(tape.scale(total, 1.0 / samples.len() as f64)?)
    }
}

/// Loss and gradient of `batch` for task `kind`.
pub fn task_loss(
    params: &DenoiserParams,
    batch: &Batch,
    kind: TaskKind,
    opts: &LossOptions,
    schedule: &DiffusionSchedule,
    rng: &RngStream,
) -> Result<(f64, Gradients), ModelError> {
    if batch.kind() != kind {
        return Err(ModelError::Domain(format!(
            "{} batch passed for the {} task",
            batch.kind().name(),
            kind.name()
        )));
    }
    let samples = prepare_batch(batch, opts, schedule, rng)?;
    VPredictionLoss {
        schedule: schedule.clone(),
    }
    .batch_loss(params, &samples)
}
