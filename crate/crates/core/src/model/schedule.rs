use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{RngStream, Tensor};

/// Signal/noise coefficients with `a_t² + s_t² = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    signal: Vec<f64>,
    noise: Vec<f64>,
}

impl DiffusionSchedule {
    /// `a_t = cos(π t / (2(N−1)))`, `s_t = sin(·)`.
    pub fn cosine(num_steps: usize) -> Result<Self, ModelError> {
        if num_steps < 2 {
            return Err(ModelError::Domain(format!(
                "schedule needs at least 2 steps, got {num_steps}"
            )));
        }
        let angle = |t: usize| std::f64::consts::FRAC_PI_2 * t as f64 / (num_steps - 1) as f64;
        Ok(Self {
            signal: (0..num_steps).map(|t| angle(t).cos()).collect(),
            noise: (0..num_steps).map(|t| angle(t).sin()).collect(),
        })
    }

    pub fn num_steps(&self) -> usize {
        self.signal.len()
    }

    pub fn signal(&self, t: usize) -> f64 {
        self.signal[t]
    }

    pub fn noise(&self, t: usize) -> f64 {
        self.noise[t]
    }

    fn check(&self, t: usize) -> Result<(), ModelError> {
        if t >= self.num_steps() {
            return Err(ModelError::Domain(format!(
                "timestep {t} outside [0, {})",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::cosine(50).expect("50 steps is valid")
    }
}

/// Draws `ε ~ N(0, I)` and returns `(x_t, v)` with `x_t = a_t x₀ + s_t ε` and
/// `v = a_t ε − s_t x₀`.
pub fn add_noise(
    x0: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut RngStream,
) -> Result<(Tensor, Tensor), ModelError> {
    schedule.check(t)?;
    let (a, s) = (schedule.signal(t), schedule.noise(t));
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
    let xt = x0
        .data()
        .iter()
        .zip(&eps)
        .map(|(x, e)| a * x + s * e)
        .collect();
    let v = x0
        .data()
        .iter()
        .zip(&eps)
        .map(|(x, e)| a * e - s * x)
        .collect();
    Ok((x0.with_data(xt)?, x0.with_data(v)?))
}
