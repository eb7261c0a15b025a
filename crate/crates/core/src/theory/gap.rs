use super::TheoryError;

/// Euclidean norm computed with scaling so tiny or huge entries do not
/// underflow or overflow when squared.
pub fn stable_norm(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * v.iter().map(|x| (x / m) * (x / m)).sum::<f64>().sqrt()
}

/// Cosine between two vectors, `None` if either norm is at or below 1e-300.
/// The result is clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (stable_norm(a), stable_norm(b));
    if na <= 1e-300 || nb <= 1e-300 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Some(dot.clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distance between the PCGrad update `(1−p)g̃₁ + p g̃₂` and the mixture
/// update `(1−p)g₁ + p g₂`, together with its upper bound
/// `|A|((1−p)/‖g₂‖ + p/‖g₁‖)`. Both are zero when `⟨g₁, g₂⟩ ≥ 0`.
pub fn pcgrad_mixture_gap(g1: &[f64], g2: &[f64], p: f64) -> Result<(f64, f64), TheoryError> {
    if g1.len() != g2.len() {
        return Err(TheoryError::Dimension(format!(
            "gradients of length {} and {}",
            g1.len(),
            g2.len()
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(TheoryError::Domain(format!("p = {p} outside [0, 1]")));
    }
    let (n1sq, n2sq) = (dot(g1, g1), dot(g2, g2));
    if n1sq == 0.0 || n2sq == 0.0 {
        return Err(TheoryError::DegenerateGradient);
    }
    let a = dot(g1, g2);
    if a >= 0.0 {
        return Ok((0.0, 0.0));
    }
    let gap_sq: f64 = g1
        .iter()
        .zip(g2)
        .map(|(&x1, &x2)| {
            let t1 = x1 - a / n2sq * x2;
            let t2 = x2 - a / n1sq * x1;
            let pc = (1.0 - p) * t1 + p * t2;
            let mix = (1.0 - p) * x1 + p * x2;
            (pc - mix) * (pc - mix)
        })
        .sum();
    let bound = a.abs() * ((1.0 - p) / n2sq.sqrt() + p / n1sq.sqrt());
    Ok((gap_sq.sqrt(), bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_inputs_have_no_gap() {
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(
                pcgrad_mixture_gap(&[1.0, 0.0], &[0.0, 1.0], p).unwrap(),
                (0.0, 0.0)
            );
        }
    }

    #[test]
    fn worked_conflict_example() {
        let (gap, bound) = pcgrad_mixture_gap(&[1.0, 0.0], &[-1.0, 1.0], 0.5).unwrap();
        assert!((gap - 0.125f64.sqrt()).abs() < 1e-15, "gap {gap}");
        assert!((bound - (0.5 / 2f64.sqrt() + 0.5)).abs() < 1e-15);
        assert!(gap <= bound);
    }

    #[test]
    fn aligned_inputs_have_no_gap() {
        assert_eq!(
            pcgrad_mixture_gap(&[1.0, 2.0], &[1.0, 2.0], 0.2).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn zero_norm_is_degenerate() {
        assert_eq!(
            pcgrad_mixture_gap(&[0.0, 0.0], &[1.0, 2.0], 0.2),
            Err(TheoryError::DegenerateGradient)
        );
    }

    #[test]
    fn cosine_survives_tiny_magnitudes() {
        let a = [3e-200, 4e-200];
        let b = [6e-250, 8e-250];
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0], &[1.0]), None);
    }
}
