use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::TelemetryError;

/// Attention cost of a video step relative to an image step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub tokens_per_frame: usize,
    pub latent_frames: usize,
    /// Probability of a video step.
    pub p: f64,
}

/// `(C_vid / C_img, E[C] / C_img) = (T², (1−p) + p T²)`.
///
/// Attention over `T·N` tokens costs `(TN)²` against `N²` for one frame, so
/// `N` cancels.
pub fn expected_step_cost(model: &CostModel) -> Result<(f64, f64), TelemetryError> {
    if model.tokens_per_frame == 0 || model.latent_frames == 0 {
        return Err(TelemetryError::Domain(
            "token and frame counts must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&model.p) {
        return Err(TelemetryError::Domain(format!(
            "p = {} outside [0, 1]",
            model.p
        )));
    }
    let t = model.latent_frames as f64;
    let ratio = t * t;
    Ok((ratio, (1.0 - model.p) + model.p * ratio))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionCategory {
    Discarded,
    Small,
    Medium,
    Large,
}

impl MotionCategory {
    pub fn label(self) -> &'static str {
        match self {
            MotionCategory::Discarded => "discarded",
            MotionCategory::Small => "small",
            MotionCategory::Medium => "medium",
            MotionCategory::Large => "large",
        }
    }
}

/// Background motion above this many pixels marks camera shake.
pub const BACKGROUND_LIMIT: f64 = 10.0;
pub const SMALL_MAX: f64 = 25.0;
pub const MEDIUM_MAX: f64 = 50.0;

/// Buckets a clip by mean foreground flow; clips whose mean background flow
/// exceeds 10 px are discarded. Bucket edges: small `[0, 25]`, medium
/// `(25, 50]`, large `(50, ∞)`.
pub fn categorize_motion(
    fg_flow_mean: f64,
    bg_flow_mean: f64,
) -> Result<MotionCategory, TelemetryError> {
    for (name, v) in [("foreground", fg_flow_mean), ("background", bg_flow_mean)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(TelemetryError::Domain(format!(
                "{name} flow {v} must be a finite non-negative number"
            )));
        }
    }
    Ok(if bg_flow_mean > BACKGROUND_LIMIT {
        MotionCategory::Discarded
    } else if fg_flow_mean <= SMALL_MAX {
        MotionCategory::Small
    } else if fg_flow_mean <= MEDIUM_MAX {
        MotionCategory::Medium
    } else {
        MotionCategory::Large
    })
}

/// Line filter: each non-blank `fg,bg` line becomes one label line.
/// Returns the number of lines labelled.
pub fn categorize_lines<R: BufRead, W: Write>(
    input: R,
    mut output: W,
) -> Result<usize, TelemetryError> {
    let mut count = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let bad = || {
            TelemetryError::Domain(format!(
                "line {}: expected `fg,bg`, found `{trimmed}`",
                i + 1
            ))
        };
        let (fg, bg) = trimmed.split_once(',').ok_or_else(bad)?;
        let fg: f64 = fg.trim().parse().map_err(|_| bad())?;
        let bg: f64 = bg.trim().parse().map_err(|_| bad())?;
        let cat = categorize_motion(fg, bg)
            .map_err(|e| TelemetryError::Domain(format!("line {}: {e}", i + 1)))?;
        writeln!(output, "{}", cat.label())?;
        count += 1;
    }
    Ok(count)
}
