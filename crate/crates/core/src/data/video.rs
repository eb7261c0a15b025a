use serde::{Deserialize, Serialize};

use super::{center_rows, DataError, SynthConfig, TokenGrid, MAX_FRAMES};
use crate::tensor::{streams, RngStream};

/// Distribution of the camera speed `κ` that drives background motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraMotion {
    Fixed { speed: f64 },
    Uniform { low: f64, high: f64 },
    HalfNormal { scale: f64 },
}

impl Default for CameraMotion {
    fn default() -> Self {
        CameraMotion::HalfNormal { scale: 0.5 }
    }
}

impl CameraMotion {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = match *self {
            CameraMotion::Fixed { speed } => speed >= 0.0 && speed.is_finite(),
            CameraMotion::Uniform { low, high } => low >= 0.0 && high >= low && high.is_finite(),
            CameraMotion::HalfNormal { scale } => scale >= 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(DataError::Domain(format!("invalid camera motion {self:?}")))
        }
    }

    fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            CameraMotion::Fixed { speed } => speed,
            CameraMotion::Uniform { low, high } => low + (high - low) * rng.uniform(),
            CameraMotion::HalfNormal { scale } => scale * rng.normal().abs(),
        }
    }
}

/// Captioned clip of `T` latent frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub frames: Vec<TokenGrid>,
    pub caption_embed: TokenGrid,
    /// Mean foreground displacement from the previous frame, in pixels
    /// (zero for the first frame).
    pub fg_flow_mag: Vec<f64>,
    pub bg_flow_mag: Vec<f64>,
}

impl SyntheticVideo {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Mean Frobenius norm of consecutive-frame differences; zero for a
    /// single frame.
    pub fn mean_frame_difference(&self) -> f64 {
        if self.frames.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .frames
            .windows(2)
            .map(|w| {
                w[0].data()
                    .iter()
                    .zip(w[1].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / (self.frames.len() - 1) as f64
    }
}

/// Video under the default sizes and camera model.
pub fn gen_video(
    seed: u64,
    frame_count: usize,
    motion_scale: f64,
) -> Result<SyntheticVideo, DataError> {
    SynthConfig {
        motion_scale,
        ..SynthConfig::default()
    }
    .video(seed, frame_count)
}

/// Offset between subject and video streams for the same seed.
const VIDEO_CHILD: u64 = 1 << 40;

impl SynthConfig {
    /// Generates a clip. The first half of each frame's tokens is foreground
    /// and moves along a shared drift plus a per-token wobble; the rest is
    /// background and pans with a camera speed drawn from `camera`. Time is
    /// normalized so a full-length clip spans `τ ∈ [0, 1]`, and all motion
    /// is linear in `motion_scale`.
    pub fn video(&self, seed: u64, frame_count: usize) -> Result<SyntheticVideo, DataError> {
        self.validate()?;
        if !(1..=MAX_FRAMES).contains(&frame_count) {
            return Err(DataError::Domain(format!(
                "frame_count = {frame_count} outside [1, {MAX_FRAMES}]"
            )));
        }
        let (n, d, l) = (self.tokens_per_frame, self.dim, self.latent_channels());
        let fg = n.div_ceil(2);
        let mut rng = RngStream::new(seed, streams::DATA).child(VIDEO_CHILD);

        let content: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
        let mut base = TokenGrid::zeros(n, d);
        for i in 0..n {
            base.row_mut(i).iter_mut().enumerate().for_each(|(c, v)| {
                *v = if c < l {
                    0.5 * rng.normal()
                } else {
                    rng.normal()
                }
            });
        }
        let mut lat_block = TokenGrid::new(
            n,
            l,
            (0..n).flat_map(|i| base.row(i)[..l].to_vec()).collect(),
        )?;
        center_rows(&mut lat_block);
        for i in 0..n {
            let row = base.row_mut(i);
            for c in 0..l {
                row[c] = content[c] + lat_block.row(i)[c];
            }
        }

        let drift: Vec<f64> = (0..d).map(|_| 0.5 * rng.normal()).collect();
        let wobble: Vec<Vec<f64>> = (0..fg)
            .map(|_| (0..d).map(|_| 0.5 * rng.normal()).collect())
            .collect();
        let phase: Vec<f64> = (0..fg)
            .map(|_| std::f64::consts::TAU * rng.uniform())
            .collect();
        let pan: Vec<f64> = (0..d).map(|_| 0.5 * rng.normal()).collect();
        let kappa = self.camera.sample(&mut rng);
        let m = self.motion_scale;

        let displacement = |i: usize, c: usize, tau: f64| -> f64 {
            if i < fg {
                let w = (std::f64::consts::TAU * tau + phase[i]).sin() - phase[i].sin();
                m * (tau * drift[c] + 0.3 * w * wobble[i][c])
            } else {
                m * kappa * tau * pan[c]
            }
        };
        let tau = |f: usize| f as f64 / (MAX_FRAMES - 1) as f64;

        let frames: Vec<TokenGrid> = (0..frame_count)
            .map(|f| {
                let mut g = base.clone();
                for i in 0..n {
                    g.row_mut(i)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(c, v)| *v += displacement(i, c, tau(f)));
                }
                g
            })
            .collect();

        let flow = |range: std::ops::Range<usize>, f: usize| -> f64 {
            if f == 0 || range.is_empty() {
                return 0.0;
            }
            let count = range.len() as f64;
            let total: f64 = range
                .map(|i| {
                    (0..d)
                        .map(|c| {
                            let delta = displacement(i, c, tau(f)) - displacement(i, c, tau(f - 1));
                            delta * delta
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            self.pixels_per_unit * total / count
        };
        let fg_flow_mag = (0..frame_count).map(|f| flow(0..fg, f)).collect();
        let bg_flow_mag = (0..frame_count).map(|f| flow(fg..n, f)).collect();
        let caption_embed = self.text_embedding(&content, &mut rng);

        Ok(SyntheticVideo {
            frames,
            caption_embed,
            fg_flow_mag,
            bg_flow_mag,
        })
    }
}
