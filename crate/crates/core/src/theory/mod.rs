//! Exact quadratic models of two interacting tasks.
//!
//! Both losses are `½ zᵀ H_i z` around a shared minimizer placed at the
//! origin (translation makes this lossless), with `H₁ = U Λ₁ Uᵀ` and
//! `H₂ = U Λ₂ Uᵀ + P` for a shared orthonormal basis `U` and an optional
//! small symmetric perturbation `P`. With `P = 0` the Hessians commute and
//! every trajectory has a closed form in the eigenbasis, which the
//! simulators are checked against.

mod gap;
mod simulate;

pub use gap::{cosine, pcgrad_mixture_gap, stable_norm};
pub use simulate::{
    closed_form_inner_product, decay_bound, mixture_eigenvalues, simulate_image_only,
    simulate_mixture_gd, ImageOnlyLimit, MixtureSpec, TheoryTrajectory,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::tensor::{streams, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("step size {eta} violates eta < {limit}")]
    StepSize { eta: f64, limit: f64 },
    #[error("trajectory diverged at step {step} (|z| = {norm:e})")]
    Divergence { step: usize, norm: f64 },
    #[error("dominant contraction tie between modes {first} and {second}: limit direction is not unique")]
    Ambiguity { first: usize, second: usize },
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("degenerate gradient: zero norm input")]
    DegenerateGradient,
}

/// Components with `|c₀ₖ|` at or below this are treated as unexplored.
pub const ACTIVE_COMPONENT_EPS: f64 = 1e-12;

/// Pair of quadratic losses sharing an eigenbasis.
#[derive(Clone, Debug)]
pub struct QuadTaskPair {
    eig1: Vec<f64>,
    eig2: Vec<f64>,
    basis: DMatrix<f64>,
    theta_star: DVector<f64>,
    perturbation: DMatrix<f64>,
    perturbation_scale: f64,
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
}

/// Builds a positive-semidefinite task pair. See [`build_task_pair_with`].
pub fn build_task_pair(
    eig1: &[f64],
    eig2: &[f64],
    basis_seed: u64,
    perturbation_scale: f64,
) -> Result<QuadTaskPair, TheoryError> {
    build_task_pair_with(eig1, eig2, basis_seed, perturbation_scale, true)
}

/// Builds a task pair with a random orthonormal basis (QR of a seeded
/// Gaussian matrix) and, when `perturbation_scale > 0`, a seeded symmetric
/// perturbation of spectral norm `perturbation_scale` added to `H₂`.
///
/// With `psd` set, negative eigenvalues are rejected.
pub fn build_task_pair_with(
    eig1: &[f64],
    eig2: &[f64],
    basis_seed: u64,
    perturbation_scale: f64,
    psd: bool,
) -> Result<QuadTaskPair, TheoryError> {
    let n = eig1.len();
    if n == 0 || eig2.len() != n {
        return Err(TheoryError::Dimension(format!(
            "eig1 has {n} entries, eig2 has {}",
            eig2.len()
        )));
    }
    if eig1.iter().chain(eig2).any(|v| !v.is_finite()) {
        return Err(TheoryError::Domain("non-finite eigenvalue".into()));
    }
    if psd && eig1.iter().chain(eig2).any(|&v| v < 0.0) {
        return Err(TheoryError::Domain(
            "negative eigenvalue with the positive-semidefinite flag set".into(),
        ));
    }
    if !(perturbation_scale >= 0.0) || !perturbation_scale.is_finite() {
        return Err(TheoryError::Domain(format!(
            "perturbation scale {perturbation_scale} must be a finite non-negative number"
        )));
    }

    let basis = random_orthonormal(n, basis_seed);
    let perturbation = if perturbation_scale > 0.0 {
        random_symmetric(n, basis_seed, perturbation_scale)
    } else {
        DMatrix::zeros(n, n)
    };
    let h1 = reconstruct(&basis, eig1);
    let h2 = reconstruct(&basis, eig2) + &perturbation;

    Ok(QuadTaskPair {
        eig1: eig1.to_vec(),
        eig2: eig2.to_vec(),
        basis,
        theta_star: DVector::zeros(n),
        perturbation,
        perturbation_scale,
        h1,
        h2,
    })
}

impl QuadTaskPair {
    pub fn dim(&self) -> usize {
        self.eig1.len()
    }

    pub fn eig1(&self) -> &[f64] {
        &self.eig1
    }

    pub fn eig2(&self) -> &[f64] {
        &self.eig2
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn perturbation(&self) -> &DMatrix<f64> {
        &self.perturbation
    }

    pub fn perturbation_scale(&self) -> f64 {
        self.perturbation_scale
    }

    pub fn is_commuting(&self) -> bool {
        self.perturbation_scale == 0.0
    }

    pub fn h1(&self) -> &DMatrix<f64> {
        &self.h1
    }

    pub fn h2(&self) -> &DMatrix<f64> {
        &self.h2
    }

    /// Eigen-coordinates `Uᵀ z`.
    pub fn coords(&self, z: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * z
    }
}

fn reconstruct(basis: &DMatrix<f64>, eig: &[f64]) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(eig));
    let h = basis * d * basis.transpose();
    // Symmetrize away rounding asymmetry.
    (&h + h.transpose()) * 0.5
}

fn random_orthonormal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = RngStream::new(seed, streams::BASIS);
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so the distribution is Haar.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn random_symmetric(n: usize, seed: u64, scale: f64) -> DMatrix<f64> {
    let mut rng = RngStream::new(seed, streams::PERTURBATION);
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let s = (&g + g.transpose()) * 0.5;
    let norm = spectral_norm_symmetric(&s);
    if norm == 0.0 {
        return DMatrix::zeros(n, n);
    }
    s * (scale / norm)
}

pub(crate) fn spectral_norm_symmetric(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}
