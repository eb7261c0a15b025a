use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::{ExperimentError, RunManifest};
use crate::telemetry::{parse_telemetry_csv, TelemetryRow};

/// Fewest telemetry rows a comparison accepts.
pub const MIN_ROWS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean `|φ|` over the tail: distance of the final band from zero.
    PhiFinalBand,
    /// Smallest of the two gradient norms over the tail.
    NormFloor,
    /// Least-squares slope of `φ` against step over the tail.
    Trend,
}

impl FromStr for Metric {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phi_final_band" => Ok(Self::PhiFinalBand),
            "norm_floor" => Ok(Self::NormFloor),
            "trend" => Ok(Self::Trend),
            _ => Err(ExperimentError::Config(format!(
                "unknown metric `{s}` (expected phi_final_band, norm_floor or trend)"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PhiFinalBand => "phi_final_band",
            Self::NormFloor => "norm_floor",
            Self::Trend => "trend",
        })
    }
}

/// Summary of the last quarter of a telemetry series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailStats {
    pub rows: usize,
    /// Mean `|φ|`, skipping degenerate rows; `NaN` if all are degenerate.
    pub band: f64,
    /// Mean `φ`.
    pub center: f64,
    pub norm_floor: f64,
    pub trend: f64,
}

impl TailStats {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::PhiFinalBand => self.band,
            Metric::NormFloor => self.norm_floor,
            Metric::Trend => self.trend,
        }
    }
}

/// Statistics over the last `⌊n/4⌋` rows.
pub fn tail_stats(rows: &[TelemetryRow]) -> Result<TailStats, ExperimentError> {
    if rows.len() < MIN_ROWS {
        return Err(ExperimentError::Report(format!(
            "insufficient telemetry: {} rows, need at least {MIN_ROWS}",
            rows.len()
        )));
    }
    let tail = &rows[rows.len() - rows.len() / 4..];
    let finite: Vec<(f64, f64)> = tail
        .iter()
        .filter(|r| r.phi.is_finite())
        .map(|r| (r.step as f64, r.phi))
        .collect();
    let n = finite.len() as f64;
    let mean = |f: &dyn Fn(&(f64, f64)) -> f64| finite.iter().map(f).sum::<f64>() / n;
    let band = mean(&|r| r.1.abs());
    let center = mean(&|r| r.1);
    let mean_step = mean(&|r| r.0);
    let sxx: f64 = finite.iter().map(|r| (r.0 - mean_step).powi(2)).sum();
    let sxy: f64 = finite
        .iter()
        .map(|r| (r.0 - mean_step) * (r.1 - center))
        .sum();
    let trend = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let norm_floor = tail
        .iter()
        .map(|r| r.norm_img.min(r.norm_vid))
        .fold(f64::INFINITY, f64::min);
    Ok(TailStats {
        rows: tail.len(),
        band,
        center,
        norm_floor,
        trend,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairComparison {
    pub telemetry_a: String,
    pub telemetry_b: String,
    pub a: f64,
    pub b: f64,
    /// `a − b`.
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub metric: Metric,
    pub pairs: Vec<PairComparison>,
    pub mean_diff: f64,
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric {}", self.metric)?;
        for p in &self.pairs {
            writeln!(
                f,
                "{} vs {}: {:.6} {:.6} diff {:+.6}",
                p.telemetry_a, p.telemetry_b, p.a, p.b, p.diff
            )?;
        }
        write!(f, "mean diff {:+.6}", self.mean_diff)
    }
}

fn telemetry_series(manifest: &Path) -> Result<Vec<(String, Vec<TelemetryRow>)>, ExperimentError> {
    let m = RunManifest::read(manifest)?;
    let dir = if manifest.is_dir() {
        manifest
    } else {
        manifest.parent().unwrap_or(Path::new("."))
    };
    let mut out = Vec::new();
    for a in m
        .artifacts
        .iter()
        .filter(|a| a.path.ends_with("telemetry.csv"))
    {
        let text = std::fs::read_to_string(dir.join(&a.path))
            .map_err(|e| ExperimentError::Report(format!("cannot read {}: {e}", a.path)))?;
        out.push((a.path.clone(), parse_telemetry_csv(&text)?));
    }
    if out.is_empty() {
        return Err(ExperimentError::Report(format!(
            "no telemetry listed in {}",
            manifest.display()
        )));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Compares two runs series by series (paired in path order, so seed
/// sweeps pair seed with seed).
pub fn compare_runs(
    run_a: &Path,
    run_b: &Path,
    metric: Metric,
) -> Result<ComparisonReport, ExperimentError> {
    let a = telemetry_series(run_a)?;
    let b = telemetry_series(run_b)?;
    if a.len() != b.len() {
        return Err(ExperimentError::Report(format!(
            "runs list {} and {} telemetry files",
            a.len(),
            b.len()
        )));
    }
    let mut pairs = Vec::with_capacity(a.len());
    for ((pa, ra), (pb, rb)) in a.iter().zip(&b) {
        let (va, vb) = (
            tail_stats(ra)?.metric(metric),
            tail_stats(rb)?.metric(metric),
        );
        pairs.push(PairComparison {
            telemetry_a: pa.clone(),
            telemetry_b: pb.clone(),
            a: va,
            b: vb,
            diff: va - vb,
        });
    }
    let mean_diff = pairs.iter().map(|p| p.diff).sum::<f64>() / pairs.len() as f64;
    Ok(ComparisonReport {
        metric,
        pairs,
        mean_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, phi: f64) -> TelemetryRow {
        TelemetryRow {
            step,
            phi,
            norm_img: 1.0 + step as f64,
            norm_vid: 2.0,
        }
    }

    #[test]
    fn tail_is_last_quarter() {
        let rows: Vec<_> = (0..8)
            .map(|i| row(i * 10, if i < 6 { 0.9 } else { -0.1 * i as f64 }))
            .collect();
        let s = tail_stats(&rows).unwrap();
        assert_eq!(s.rows, 2);
        assert!((s.band - 0.65).abs() < 1e-12);
        assert!((s.center + 0.65).abs() < 1e-12);
        assert!((s.trend + 0.01).abs() < 1e-12);
        assert_eq!(s.norm_floor, 2.0);
    }

    #[test]
    fn too_few_rows() {
        let rows: Vec<_> = (0..3).map(|i| row(i, 0.0)).collect();
        assert!(
            matches!(tail_stats(&rows), Err(ExperimentError::Report(m)) if m.contains("insufficient"))
        );
    }

    #[test]
    fn metric_names() {
        for m in [Metric::PhiFinalBand, Metric::NormFloor, Metric::Trend] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("band".parse::<Metric>().is_err());
    }
}
