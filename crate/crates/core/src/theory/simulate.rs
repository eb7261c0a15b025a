use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::gap::{cosine, stable_norm};
use super::{QuadTaskPair, TheoryError, ACTIVE_COMPONENT_EPS};
use crate::tensor::RngStream;

/// Mixture run parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    /// Probability of taking a step on task 2.
    pub p: f64,
    pub eta: f64,
    /// Initial offset `θ₀ − θ*`.
    pub z0: Vec<f64>,
    pub steps: usize,
}

/// Per-step record of a quadratic run. All arrays have `steps + 1` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TheoryTrajectory {
    /// `A_t = ⟨g₁, g₂⟩`.
    pub inner_product: Vec<f64>,
    /// Gradient cosine, `NaN` where either gradient norm is at or below 1e-300.
    pub cosine: Vec<f64>,
    pub norm1: Vec<f64>,
    pub norm2: Vec<f64>,
    /// Eigen-coordinates `c_t = Uᵀ z_t`.
    pub coeffs: Vec<Vec<f64>>,
}

impl TheoryTrajectory {
    fn record(&mut self, pair: &QuadTaskPair, z: &DVector<f64>) {
        let g1 = pair.h1() * z;
        let g2 = pair.h2() * z;
        self.inner_product.push(g1.dot(&g2));
        self.cosine
            .push(cosine(g1.as_slice(), g2.as_slice()).unwrap_or(f64::NAN));
        self.norm1.push(stable_norm(g1.as_slice()));
        self.norm2.push(stable_norm(g2.as_slice()));
        self.coeffs.push(pair.coords(z).as_slice().to_vec());
    }

    pub fn len(&self) -> usize {
        self.inner_product.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner_product.is_empty()
    }

    /// CSV with header `step,A,phi,norm1,norm2`, one row per step. Values use
    /// the shortest representation that round-trips.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,A,phi,norm1,norm2")?;
        for t in 0..self.len() {
            writeln!(
                w,
                "{t},{},{},{},{}",
                self.inner_product[t], self.cosine[t], self.norm1[t], self.norm2[t]
            )?;
        }
        Ok(())
    }
}

/// Eigenvalues `μ_k = (1−p)λ⁽¹⁾_k + pλ⁽²⁾_k` of the mixture Hessian in the
/// shared basis (exact when the pair commutes).
pub fn mixture_eigenvalues(pair: &QuadTaskPair, p: f64) -> Vec<f64> {
    pair.eig1()
        .iter()
        .zip(pair.eig2())
        .map(|(l1, l2)| (1.0 - p) * l1 + p * l2)
        .collect()
}

fn check_spec(pair: &QuadTaskPair, spec: &MixtureSpec) -> Result<DVector<f64>, TheoryError> {
    if spec.z0.len() != pair.dim() {
        return Err(TheoryError::Dimension(format!(
            "z0 has {} entries for a {}-dimensional pair",
            spec.z0.len(),
            pair.dim()
        )));
    }
    if !(0.0..=1.0).contains(&spec.p) {
        return Err(TheoryError::Domain(format!(
            "p = {} outside [0, 1]",
            spec.p
        )));
    }
    if !(spec.eta > 0.0) || !spec.eta.is_finite() {
        return Err(TheoryError::Domain(format!(
            "eta = {} must be positive",
            spec.eta
        )));
    }
    Ok(DVector::from_column_slice(&spec.z0))
}

/// Indices `k` with `|c₀ₖ| > 1e-12`.
fn active_components(pair: &QuadTaskPair, z0: &DVector<f64>) -> Vec<usize> {
    let c0 = pair.coords(z0);
    (0..pair.dim())
        .filter(|&k| c0[k].abs() > ACTIVE_COMPONENT_EPS)
        .collect()
}

/// Largest mixture curvature on the explored subspace. For a perturbed pair
/// the full spectrum of `M` is used.
fn mu_max(pair: &QuadTaskPair, p: f64, z0: &DVector<f64>) -> f64 {
    if pair.is_commuting() {
        let mu = mixture_eigenvalues(pair, p);
        active_components(pair, z0)
            .into_iter()
            .map(|k| mu[k])
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        let m: DMatrix<f64> = pair.h1() * (1.0 - p) + pair.h2() * p;
        SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_divergence(z: &DVector<f64>, step: usize) -> Result<(), TheoryError> {
    let norm = stable_norm(z.as_slice());
    if norm > 1e12 || !norm.is_finite() {
        return Err(TheoryError::Divergence { step, norm });
    }
    Ok(())
}

/// Runs gradient descent on the mixture `(1−p)L₁ + pL₂`.
///
/// Deterministic mode iterates `z ← (I − ηM)z` and requires `η < 1/μ_max`.
/// Stochastic mode draws `u` from `rng` each step and moves along `H₂z` if
/// `u < p`, else along `H₁z`.
pub fn simulate_mixture_gd(
    pair: &QuadTaskPair,
    spec: &MixtureSpec,
    stochastic: bool,
    rng: &mut RngStream,
) -> Result<TheoryTrajectory, TheoryError> {
    let mut z = check_spec(pair, spec)?;
    if !stochastic {
        let limit = mu_max(pair, spec.p, &z);
        if limit > 0.0 && spec.eta >= 1.0 / limit {
            return Err(TheoryError::StepSize {
                eta: spec.eta,
                limit: 1.0 / limit,
            });
        }
    }
    let mut traj = TheoryTrajectory::default();
    traj.record(pair, &z);
    for t in 1..=spec.steps {
        let step = if stochastic {
            if rng.uniform() < spec.p {
                pair.h2() * &z
            } else {
                pair.h1() * &z
            }
        } else {
            pair.h1() * &z * (1.0 - spec.p) + pair.h2() * &z * spec.p
        };
        z -= step * spec.eta;
        check_divergence(&z, t)?;
        traj.record(pair, &z);
    }
    Ok(traj)
}

/// `Σ_k λ⁽¹⁾_k λ⁽²⁾_k (1−ημ_k)^{2t} c₀ₖ²` for a commuting pair.
pub fn closed_form_inner_product(
    pair: &QuadTaskPair,
    spec: &MixtureSpec,
    t: usize,
) -> Result<f64, TheoryError> {
    let z0 = check_spec(pair, spec)?;
    if !pair.is_commuting() {
        return Err(TheoryError::Domain(
            "closed form requires a commuting pair (perturbation_scale = 0)".into(),
        ));
    }
    let c0 = pair.coords(&z0);
    let mu = mixture_eigenvalues(pair, spec.p);
    let exp =
        i32::try_from(2 * t).map_err(|_| TheoryError::Domain(format!("t = {t} too large")))?;
    Ok((0..pair.dim())
        .map(|k| {
            pair.eig1()[k] * pair.eig2()[k] * (1.0 - spec.eta * mu[k]).powi(exp) * c0[k] * c0[k]
        })
        .sum())
}

/// `C (1−ημ_min)^{2t}` with `C = max_k |λ⁽¹⁾_k λ⁽²⁾_k| · ‖c₀‖²` and `μ_min`
/// taken over the active components of `c₀`.
pub fn decay_bound(pair: &QuadTaskPair, spec: &MixtureSpec, t: usize) -> Result<f64, TheoryError> {
    let z0 = check_spec(pair, spec)?;
    if !pair.is_commuting() {
        return Err(TheoryError::Domain(
            "decay bound is derived for a commuting pair (perturbation_scale = 0)".into(),
        ));
    }
    let c0 = pair.coords(&z0);
    let mu = mixture_eigenvalues(pair, spec.p);
    let active = active_components(pair, &z0);
    if active.is_empty() {
        return Ok(0.0);
    }
    let mu_min = active.iter().map(|&k| mu[k]).fold(f64::INFINITY, f64::min);
    let mu_max = active
        .iter()
        .map(|&k| mu[k])
        .fold(f64::NEG_INFINITY, f64::max);
    if mu_min <= 0.0 {
        return Err(TheoryError::AssumptionViolation(format!(
            "mixture curvature mu_min = {mu_min} is not positive on the explored subspace"
        )));
    }
    if spec.eta >= 1.0 / mu_max {
        return Err(TheoryError::StepSize {
            eta: spec.eta,
            limit: 1.0 / mu_max,
        });
    }
    let c = pair
        .eig1()
        .iter()
        .zip(pair.eig2())
        .fold(0.0f64, |acc, (a, b)| acc.max((a * b).abs()))
        * c0.norm_squared();
    let exp =
        i32::try_from(2 * t).map_err(|_| TheoryError::Domain(format!("t = {t} too large")))?;
    Ok(c * (1.0 - spec.eta * mu_min).powi(exp))
}

/// Limit of the gradient cosine under image-only descent.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageOnlyLimit {
    /// Mode with the slowest contraction `|1 − ηλ⁽¹⁾_k|` among active ones.
    pub dominant_mode: usize,
    pub contraction: f64,
    /// Slowest contraction among the remaining active modes.
    pub second_contraction: Option<f64>,
    /// `sign(λ⁽¹⁾_{k*} λ⁽²⁾_{k*})`.
    pub limit: f64,
    /// `λ⁽²⁾_{k*} = 0`: the limit is zero and the tasks do not conflict.
    pub degenerate: bool,
    /// Steps after which `(second / dominant)^T < 1e-6`.
    pub horizon: usize,
}

/// Runs gradient descent on task 1 alone, `z ← (I − ηH₁)z`, and predicts the
/// limiting cosine from the dominant eigen-direction.
pub fn simulate_image_only(
    pair: &QuadTaskPair,
    eta: f64,
    z0: &[f64],
    steps: usize,
) -> Result<(TheoryTrajectory, ImageOnlyLimit), TheoryError> {
    let spec = MixtureSpec {
        p: 0.0,
        eta,
        z0: z0.to_vec(),
        steps,
    };
    let mut z = check_spec(pair, &spec)?;
    let lambda_max = pair
        .eig1()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if lambda_max <= 0.0 || eta >= 2.0 / lambda_max {
        return Err(TheoryError::Domain(format!(
            "eta = {eta} outside (0, 2/lambda_max(H1))"
        )));
    }
    let active = active_components(pair, &z);
    if active.is_empty() {
        return Err(TheoryError::Domain("z0 is the stationary point".into()));
    }
    if let Some(&k) = active.iter().find(|&&k| pair.eig1()[k] <= 0.0) {
        return Err(TheoryError::Domain(format!(
            "H1 is not positive definite on the explored subspace (lambda1[{k}] = {})",
            pair.eig1()[k]
        )));
    }

    let factor = |k: usize| (1.0 - eta * pair.eig1()[k]).abs();
    let mut order = active.clone();
    order.sort_by(|&a, &b| factor(b).total_cmp(&factor(a)).then(a.cmp(&b)));
    let k_star = order[0];
    let second = order.get(1).copied();
    if let Some(k2) = second {
        let (f1, f2) = (factor(k_star), factor(k2));
        if (f1 - f2).abs() <= 1e-12 * f1.max(f2) {
            return Err(TheoryError::Ambiguity {
                first: k_star.min(k2),
                second: k_star.max(k2),
            });
        }
    }
    let product = pair.eig1()[k_star] * pair.eig2()[k_star];
    let contraction = factor(k_star);
    let second_contraction = second.map(factor);
    let horizon = match second_contraction {
        Some(f2) if f2 > 0.0 => ((1e-6f64).ln() / (f2 / contraction).ln()).ceil() as usize,
        _ => 1,
    };
    let limit = ImageOnlyLimit {
        dominant_mode: k_star,
        contraction,
        second_contraction,
        limit: if product == 0.0 {
            0.0
        } else {
            product.signum()
        },
        degenerate: product == 0.0,
        horizon,
    };

    let mut traj = TheoryTrajectory::default();
    traj.record(pair, &z);
    for t in 1..=steps {
        z -= pair.h1() * &z * eta;
        check_divergence(&z, t)?;
        traj.record(pair, &z);
    }
    Ok((traj, limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::{build_task_pair, build_task_pair_with};

    fn spec(p: f64, eta: f64, z0: &[f64], steps: usize) -> MixtureSpec {
        MixtureSpec {
            p,
            eta,
            z0: z0.to_vec(),
            steps,
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let pair = build_task_pair(&[2.0], &[1.0], 0, 0.0).unwrap();
        let s = spec(0.2, 0.1, &[1.0], 5);
        let traj = simulate_mixture_gd(&pair, &s, false, &mut RngStream::new(0, 0)).unwrap();
        let expect = 2.0 * 0.82f64.powi(10);
        assert!((traj.inner_product[5] - expect).abs() < 1e-14 * expect);
        assert!((expect - 0.274896).abs() < 1e-6);
        let cf = closed_form_inner_product(&pair, &s, 5).unwrap();
        assert!((cf - expect).abs() < 1e-14 * expect);
        // Tight in one dimension.
        let b = decay_bound(&pair, &s, 5).unwrap();
        assert!((b - expect).abs() < 1e-14 * expect);
    }

    #[test]
    fn identical_tasks_are_aligned() {
        let pair = build_task_pair(&[0.5, 1.5, 2.0], &[0.5, 1.5, 2.0], 4, 0.0).unwrap();
        let s = spec(0.3, 0.2, &[1.0, -2.0, 0.5], 50);
        let traj = simulate_mixture_gd(&pair, &s, false, &mut RngStream::new(0, 0)).unwrap();
        for phi in &traj.cosine {
            assert!((phi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn p_zero_matches_image_only() {
        let pair = build_task_pair(&[0.5, 1.5], &[2.0, 0.1], 2, 0.0).unwrap();
        let s = spec(0.0, 0.3, &[1.0, 1.0], 40);
        let mix = simulate_mixture_gd(&pair, &s, false, &mut RngStream::new(0, 0)).unwrap();
        let (img, _) = simulate_image_only(&pair, 0.3, &[1.0, 1.0], 40).unwrap();
        assert_eq!(mix, img);
    }

    #[test]
    fn closed_form_at_zero_and_stationary_point() {
        let pair = build_task_pair(&[1.0, 3.0], &[2.0, 0.5], 9, 0.0).unwrap();
        let s = spec(0.4, 0.1, &[0.7, -1.1], 0);
        let z = DVector::from_column_slice(&s.z0);
        let direct = (pair.h1() * &z).dot(&(pair.h2() * &z));
        let cf = closed_form_inner_product(&pair, &s, 0).unwrap();
        assert!((cf - direct).abs() < 1e-12 * direct.abs().max(1.0));
        let zero = spec(0.4, 0.1, &[0.0, 0.0], 0);
        for t in [0, 1, 10] {
            assert_eq!(closed_form_inner_product(&pair, &zero, t).unwrap(), 0.0);
        }
        let perturbed = build_task_pair(&[1.0, 3.0], &[2.0, 0.5], 9, 0.01).unwrap();
        assert!(matches!(
            closed_form_inner_product(&perturbed, &s, 3),
            Err(TheoryError::Domain(_))
        ));
    }

    #[test]
    fn bound_dominates_two_dimensional_run() {
        let pair = build_task_pair(&[1.0, 3.0], &[2.0, 2.0], 5, 0.0).unwrap();
        let s = spec(0.5, 0.1, &[1.0, 1.0], 200);
        let traj = simulate_mixture_gd(&pair, &s, false, &mut RngStream::new(0, 0)).unwrap();
        for t in 0..=200 {
            let b = decay_bound(&pair, &s, t).unwrap();
            assert!(
                traj.inner_product[t].abs() <= b + 1e-12 * b.max(1.0),
                "t={t}"
            );
        }
    }

    #[test]
    fn bound_rejects_non_positive_curvature() {
        let pair = build_task_pair(&[0.0, 1.0], &[0.0, 1.0], 0, 0.0).unwrap();
        // Put all of z0 on the first eigenvector, where mu = 0.
        let u = pair.basis().column(0).into_owned();
        let s = spec(0.5, 0.1, u.as_slice(), 10);
        assert!(matches!(
            decay_bound(&pair, &s, 3),
            Err(TheoryError::AssumptionViolation(_))
        ));
    }

    #[test]
    fn deterministic_step_size_enforced() {
        let pair = build_task_pair(&[2.0], &[1.0], 0, 0.0).unwrap();
        let s = spec(0.2, 1.0, &[1.0], 10);
        assert!(matches!(
            simulate_mixture_gd(&pair, &s, false, &mut RngStream::new(0, 0)),
            Err(TheoryError::StepSize { .. })
        ));
    }

    #[test]
    fn stochastic_divergence_reports_step() {
        let pair = build_task_pair(&[30.0], &[30.0], 0, 0.0).unwrap();
        let s = spec(0.5, 1.0, &[1.0], 100);
        match simulate_mixture_gd(&pair, &s, true, &mut RngStream::new(0, 0)) {
            Err(TheoryError::Divergence { step, .. }) => assert!(step > 1 && step < 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn image_only_dominant_slow_mode() {
        let pair = build_task_pair(&[2.0, 0.5], &[1.0, 1.0], 1, 0.0).unwrap();
        let (traj, lim) = simulate_image_only(&pair, 0.1, &[1.0, 1.0], 200).unwrap();
        assert_eq!(lim.dominant_mode, 1);
        assert!((lim.contraction - 0.95).abs() < 1e-15);
        assert_eq!(lim.limit, 1.0);
        assert!(traj.cosine[200] >= 0.999);
    }

    #[test]
    fn image_only_degenerate_and_antiparallel() {
        let pair = build_task_pair(&[2.0, 0.5], &[1.0, 0.0], 1, 0.0).unwrap();
        let (_, lim) = simulate_image_only(&pair, 0.1, &[1.0, 1.0], 10).unwrap();
        assert!(lim.degenerate);
        assert_eq!(lim.limit, 0.0);

        let anti = build_task_pair_with(&[1.0], &[-1.0], 0, 0.0, false).unwrap();
        let (traj, lim) = simulate_image_only(&anti, 0.1, &[1.0], 30).unwrap();
        assert_eq!(lim.limit, -1.0);
        assert!(traj.cosine.iter().all(|&c| (c + 1.0).abs() < 1e-15));
    }

    #[test]
    fn image_only_errors() {
        let pair = build_task_pair(&[1.0, 1.0], &[1.0, 2.0], 3, 0.0).unwrap();
        assert!(matches!(
            simulate_image_only(&pair, 0.1, &[1.0, 0.5], 10),
            Err(TheoryError::Ambiguity { .. })
        ));
        assert!(matches!(
            simulate_image_only(&pair, 2.5, &[1.0, 0.5], 10),
            Err(TheoryError::Domain(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let pair = build_task_pair(&[2.0], &[1.0], 0, 0.0).unwrap();
        let s = spec(0.2, 0.1, &[1.0], 2);
        let traj = simulate_mixture_gd(&pair, &s, false, &mut RngStream::new(0, 0)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,A,phi,norm1,norm2");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,2,1,2,1"));
    }
}
