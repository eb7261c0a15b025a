//! Synthetic corpora for the two tasks.
//!
//! Tokens stand in directly for encoder latents. An identity sample is a pair
//! of views of one subject; the subject latent lives in the first `d/4`
//! channels and is recovered exactly by averaging those channels over the
//! tokens of a view. A video sample is a short clip whose frames follow a
//! smooth seeded trajectory with separate foreground and camera motion.

mod container;
mod regularize;
mod subject;
mod video;

pub use container::{read_corpus, write_corpus, Corpus};
pub use regularize::{drop_tokens, select_reference_frame, DropMask, FrameMode};
pub use subject::{gen_subject_pair, subject_latent, SubjectPair};
pub use video::{gen_video, CameraMotion, SyntheticVideo};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Longest supported clip, in latent frames.
pub const MAX_FRAMES: usize = 13;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed corpus: {0}")]
    Format(String),
    #[error("data source exhausted after {epochs} epoch(s)")]
    Exhausted { epochs: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Generator sizes and noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Token width `d`; must be a positive multiple of 4.
    pub dim: usize,
    /// Visual tokens per frame (`N_img`).
    pub tokens_per_frame: usize,
    /// Prompt / caption tokens (`M`).
    pub text_tokens: usize,
    pub pose_noise: f64,
    pub motion_scale: f64,
    pub camera: CameraMotion,
    /// Pixels per unit of token displacement, for flow magnitudes.
    pub pixels_per_unit: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            tokens_per_frame: 16,
            text_tokens: 4,
            pose_noise: 0.05,
            motion_scale: 1.0,
            camera: CameraMotion::default(),
            pixels_per_unit: 40.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(DataError::Domain(format!(
                "dim = {} must be a positive multiple of 4",
                self.dim
            )));
        }
        if self.tokens_per_frame == 0 {
            return Err(DataError::Domain(
                "tokens_per_frame must be positive".into(),
            ));
        }
        for (name, v) in [
            ("pose_noise", self.pose_noise),
            ("motion_scale", self.motion_scale),
            ("pixels_per_unit", self.pixels_per_unit),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DataError::Domain(format!(
                    "{name} = {v} must be non-negative"
                )));
            }
        }
        self.camera.validate()
    }

    /// Channels carrying the subject latent.
    pub fn latent_channels(&self) -> usize {
        self.dim / 4
    }
}

/// Row-major `rows × dim` block of tokens. Unlike [`Tensor`], zero rows are
/// allowed, which is what a fully dropped conditioning sequence looks like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if dim == 0 || data.len() != rows * dim {
            return Err(DataError::Domain(format!(
                "token grid {rows}x{dim} given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self::zeros(0, dim)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps the rows whose flag is set, in order.
    pub fn select(&self, keep: &[bool]) -> TokenGrid {
        let data = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .flat_map(|(i, _)| self.row(i).iter().copied())
            .collect::<Vec<_>>();
        TokenGrid {
            rows: data.len() / self.dim,
            dim: self.dim,
            data,
        }
    }

    /// `None` for an empty grid.
    pub fn to_tensor(&self) -> Result<Option<Tensor>, TensorError> {
        if self.rows == 0 {
            return Ok(None);
        }
        Tensor::new(vec![self.rows, self.dim], self.data.clone()).map(Some)
    }

    /// Per-channel mean over rows.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.rows {
            for (acc, v) in m.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Subtracts the per-channel mean over rows from every row.
pub(crate) fn center_rows(grid: &mut TokenGrid) {
    let means = grid.channel_means();
    for i in 0..grid.rows() {
        for (v, m) in grid.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_has_no_tensor() {
        let g = TokenGrid::empty(4);
        assert!(g.to_tensor().unwrap().is_none());
        assert!(TokenGrid::new(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn select_and_center() {
        let mut g = TokenGrid::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(g.select(&[true, false, true]).data(), &[1.0, 2.0, 5.0, 6.0]);
        center_rows(&mut g);
        assert_eq!(g.channel_means(), vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = SynthConfig {
            dim: 6,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
