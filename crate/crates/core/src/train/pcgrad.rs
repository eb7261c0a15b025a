use std::collections::VecDeque;

use super::TrainError;
use crate::model::TaskKind;

/// Stabilizer in the projection denominators.
pub const PCGRAD_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projects each gradient off the other's direction when `⟨g₁, g₂⟩ < 0`;
/// otherwise returns both unchanged.
pub fn pcgrad_project(g1: &[f64], g2: &[f64]) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if g1.len() != g2.len() {
        return Err(TrainError::Config(format!(
            "gradients of length {} and {}",
            g1.len(),
            g2.len()
        )));
    }
    let (n1, n2) = (dot(g1, g1), dot(g2, g2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(TrainError::DegenerateGradient);
    }
    let a = dot(g1, g2);
    if a >= 0.0 {
        return Ok((g1.to_vec(), g2.to_vec()));
    }
    let (c1, c2) = (a / (n2 + PCGRAD_EPS), a / (n1 + PCGRAD_EPS));
    let p1 = g1.iter().zip(g2).map(|(x, y)| x - c1 * y).collect();
    let p2 = g2.iter().zip(g1).map(|(y, x)| y - c2 * x).collect();
    Ok((p1, p2))
}

/// `(1−p)·g̃_img + p·g̃_vid`, plus whether a projection happened.
pub fn combine_pcgrad(
    g_img: &[f64],
    g_vid: &[f64],
    p: f64,
) -> Result<(Vec<f64>, bool), TrainError> {
    let conflict = dot(g_img, g_vid) < 0.0;
    let (a, b) = pcgrad_project(g_img, g_vid)?;
    Ok((
        a.iter()
            .zip(&b)
            .map(|(x, y)| (1.0 - p) * x + p * y)
            .collect(),
        conflict,
    ))
}

/// FIFO of recent gradients tagged by task.
#[derive(Clone, Debug, PartialEq)]
pub struct PCGradBuffer {
    capacity: usize,
    entries: VecDeque<(TaskKind, Vec<f64>)>,
}

impl PCGradBuffer {
    pub fn new(capacity: usize) -> Result<Self, TrainError> {
        if capacity == 0 {
            return Err(TrainError::Config(
                "buffer capacity must be at least 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, task: TaskKind, grad: Vec<f64>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((task, grad));
    }

    /// Most recent gradient of `task`, if any remains.
    pub fn latest(&self, task: TaskKind) -> Option<&[f64]> {
        self.entries
            .iter()
            .rev()
            .find(|(t, _)| *t == task)
            .map(|(_, g)| g.as_slice())
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskKind> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }
}
