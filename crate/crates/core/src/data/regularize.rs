use serde::{Deserialize, Serialize};

use super::{DataError, SyntheticVideo, TokenGrid};
use crate::tensor::RngStream;

/// How the conditioning frame is chosen from a clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    First,
    #[default]
    Random,
}

/// Which reference tokens survived a drop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropMask {
    pub keep: Vec<bool>,
    pub p_drop: f64,
}

impl DropMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Picks the conditioning frame. Indices are 1-based; `Random` draws
/// uniformly from `1..=T`.
pub fn select_reference_frame<'a>(
    video: &'a SyntheticVideo,
    rng: &mut RngStream,
    mode: FrameMode,
) -> Result<(usize, &'a TokenGrid), DataError> {
    let t = video.frame_count();
    if t == 0 {
        return Err(DataError::Domain("video has no frames".into()));
    }
    let index = match mode {
        FrameMode::First => 1,
        FrameMode::Random => rng.below(t) + 1,
    };
    Ok((index, &video.frames[index - 1]))
}

/// Drops each token independently with probability `p_drop`; dropped tokens
/// are removed, so the sequence shortens. One uniform is drawn per token
/// regardless of `p_drop`.
pub fn drop_tokens(
    tokens: &TokenGrid,
    p_drop: f64,
    rng: &mut RngStream,
) -> Result<(TokenGrid, DropMask), DataError> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(DataError::Domain(format!(
            "p_drop = {p_drop} outside [0, 1]"
        )));
    }
    let keep: Vec<bool> = (0..tokens.rows())
        .map(|_| rng.uniform() >= p_drop)
        .collect();
    Ok((tokens.select(&keep), DropMask { keep, p_drop }))
}
