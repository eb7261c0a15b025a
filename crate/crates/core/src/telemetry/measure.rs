use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::flat::{flatten, presync_aggregate, raw_cosine, FlatGradient};
use super::TelemetryError;
use crate::model::{
    prepare_batch, Batch, DenoiserParams, DiffusionSchedule, LossModel, LossOptions, ParamGroup,
};
use crate::tensor::{streams, RngStream};

/// Default stabilizer in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;
/// Norms at or below this make the cosine undefined.
pub const NORM_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStats {
    pub phi: Option<f64>,
    pub norm_img: f64,
    pub norm_vid: f64,
}

/// Gradient geometry at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TelemetryRecord {
    pub step: u64,
    /// `None` when either gradient norm is degenerate.
    pub phi: Option<f64>,
    pub norm_img: f64,
    pub norm_vid: f64,
    pub loss_img: f64,
    pub loss_vid: f64,
    pub degenerate: bool,
    pub groups: BTreeMap<ParamGroup, GroupStats>,
}

/// Fixed validation data and measurement seed.
#[derive(Clone, Debug)]
pub struct MeasureSpec {
    pub val_img: Batch,
    pub val_vid: Batch,
    pub opts: LossOptions,
    pub schedule: DiffusionSchedule,
    /// Re-used at every checkpoint, so all measurements see the same
    /// timesteps, noise and regularizer draws.
    pub seed: u64,
    /// Simulated data-parallel shards per batch; must divide both batch sizes.
    pub shards: usize,
}

fn stats(u: &[f64], v: &[f64], eps: f64) -> GroupStats {
    let (nu, nv) = (crate::theory::stable_norm(u), crate::theory::stable_norm(v));
    let phi = (nu > NORM_FLOOR && nv > NORM_FLOOR).then(|| raw_cosine(u, v, eps).clamp(-1.0, 1.0));
    GroupStats {
        phi,
        norm_img: nu,
        norm_vid: nv,
    }
}

/// Pre-sync gradient of one validation batch: per-shard gradients of the
/// mean loss, averaged in shard order.
pub fn presync_gradient(
    params: &DenoiserParams,
    model: &dyn LossModel,
    batch: &Batch,
    spec: &MeasureSpec,
    step: u64,
) -> Result<(f64, FlatGradient), TelemetryError> {
    let rng = RngStream::new(spec.seed, streams::MEASURE);
    let samples = prepare_batch(batch, &spec.opts, &spec.schedule, &rng)?;
    if spec.shards == 0 || samples.len() % spec.shards != 0 {
        return Err(TelemetryError::Aggregation(format!(
            "{} samples cannot be split into {} equal shards",
            samples.len(),
            spec.shards
        )));
    }
    let per = samples.len() / spec.shards;
    let mut flats = Vec::with_capacity(spec.shards);
    let mut loss = 0.0;
    for chunk in samples.chunks(per) {
        let (l, g) = model.batch_loss(params, chunk)?;
        loss += l;
        flats.push(flatten(&g, params.trainable_index(), batch.kind(), step)?);
    }
    Ok((loss / spec.shards as f64, presync_aggregate(&flats)?))
}

/// Measures both task gradients at frozen `params`. Gradients are unclipped.
pub fn measure_checkpoint(
    params: &DenoiserParams,
    model: &dyn LossModel,
    spec: &MeasureSpec,
    step: u64,
) -> Result<TelemetryRecord, TelemetryError> {
    let before = (params.base_fingerprint(), params.trainable_fingerprint());
    let (loss_img, g_img) = presync_gradient(params, model, &spec.val_img, spec, step)?;
    let (loss_vid, g_vid) = presync_gradient(params, model, &spec.val_vid, spec, step)?;
    if (params.base_fingerprint(), params.trainable_fingerprint()) != before {
        return Err(TelemetryError::FrozenMeasurement(step));
    }
    let global = stats(&g_img.values, &g_vid.values, COSINE_EPS);
    let (gi, gv) = (g_img.groups(), g_vid.groups());
    let groups = gi
        .iter()
        .map(|(k, u)| (*k, stats(u, &gv[k], COSINE_EPS)))
        .collect();
    Ok(TelemetryRecord {
        step,
        phi: global.phi,
        norm_img: global.norm_img,
        norm_vid: global.norm_vid,
        loss_img,
        loss_vid,
        degenerate: global.phi.is_none(),
        groups,
    })
}

/// Column order of the telemetry CSV.
pub const GROUP_COLUMNS: [ParamGroup; 3] = [
    ParamGroup::Attention,
    ParamGroup::FeedForward,
    ParamGroup::Embedding,
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn write_telemetry_header<W: Write>(mut w: W) -> std::io::Result<()> {
    let groups: Vec<String> = GROUP_COLUMNS
        .iter()
        .map(|g| format!("phi_{}", g.name()))
        .collect();
    writeln!(w, "step,phi,norm_img,norm_vid,{}", groups.join(","))
}

pub fn write_telemetry_row<W: Write>(mut w: W, r: &TelemetryRecord) -> std::io::Result<()> {
    let groups: Vec<String> = GROUP_COLUMNS
        .iter()
        .map(|g| fmt_opt(r.groups.get(g).and_then(|s| s.phi)))
        .collect();
    writeln!(
        w,
        "{},{},{},{},{}",
        r.step,
        fmt_opt(r.phi),
        r.norm_img,
        r.norm_vid,
        groups.join(",")
    )
}

/// `step, phi, norm_img, norm_vid` of one CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TelemetryRow {
    pub step: u64,
    pub phi: f64,
    pub norm_img: f64,
    pub norm_vid: f64,
}

pub fn parse_telemetry_csv(text: &str) -> Result<Vec<TelemetryRow>, TelemetryError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| TelemetryError::Report("empty telemetry file".into()))?;
    if !header.starts_with("step,phi,norm_img,norm_vid") {
        return Err(TelemetryError::Report(format!(
            "unexpected header `{header}`"
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad =
                || TelemetryError::Report(format!("malformed telemetry row {}: `{line}`", i + 2));
            if f.len() < 4 {
                return Err(bad());
            }
            Ok(TelemetryRow {
                step: f[0].parse().map_err(|_| bad())?,
                phi: f[1].parse().map_err(|_| bad())?,
                norm_img: f[2].parse().map_err(|_| bad())?,
                norm_vid: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
