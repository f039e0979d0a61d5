//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use rand::seq::index::sample;

use super::rng::seeded;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    /// Central-difference half step.
    pub step: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, abs_floor)`
    /// so that coordinates whose true gradient is ~0 compare absolutely.
    pub abs_floor: f64,
    /// Above this many coordinates a seeded random subset of this size is checked.
    pub max_coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            abs_floor: 1e-6,
            max_coordinates: 10_000,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_parameter_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `loss_and_grad` with central
/// finite differences of its loss, coordinate by coordinate.
pub fn gradient_check<F>(mut loss_and_grad: F, params: &[f64], config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (first, analytic) = loss_and_grad(params);
    let (second, _) = loss_and_grad(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(alloc::format!(
            "gradient has {} coordinates, parameters have {}",
            analytic.len(),
            params.len()
        )));
    }

    let coords: Vec<usize> = if params.len() > config.max_coordinates {
        let mut rng = seeded(config.seed);
        let mut idx = sample(&mut rng, params.len(), config.max_coordinates).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..params.len()).collect()
    };

    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        passed: true,
    };
    for &i in &coords {
        let orig = theta[i];
        theta[i] = orig + config.step;
        let (plus, _) = loss_and_grad(&theta);
        theta[i] = orig - config.step;
        let (minus, _) = loss_and_grad(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(config.abs_floor);
        let err = (a - numeric).abs() / denom;
        if !(err <= report.max_relative_error) {
            report.max_relative_error = err;
            report.worst_parameter_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_relative_error < config.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::cell::Cell;

    fn half_norm_sq(t: &[f64]) -> (f64, Vec<f64>) {
        (0.5 * t.iter().map(|x| x * x).sum::<f64>(), t.to_vec())
    }

    #[test]
    fn quadratic_is_exact() {
        let theta = vec![0.3, -1.2, 2.5, 0.0, 7.0];
        let report = gradient_check(half_norm_sq, &theta, &GradCheckConfig::with_tolerance(1e-9)).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_relative_error < 1e-9);
    }

    #[test]
    fn detects_corrupted_coordinate() {
        let theta = vec![0.3, -1.2, 2.5];
        let corrupted = |t: &[f64]| {
            let (l, mut g) = half_norm_sq(t);
            g[1] *= 2.0;
            (l, g)
        };
        let report = gradient_check(corrupted, &theta, &GradCheckConfig::default()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_parameter_index, 1);
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0u32);
        let flaky = |t: &[f64]| {
            calls.set(calls.get() + 1);
            (f64::from(calls.get()), t.to_vec())
        };
        let err = gradient_check(flaky, &[1.0], &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }

    #[test]
    fn subsamples_large_parameter_vectors() {
        let theta = vec![0.5; 50];
        let config = GradCheckConfig {
            max_coordinates: 10,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(half_norm_sq, &theta, &config).unwrap();
        assert_eq!(report.checked, 10);
        assert!(report.passed);
    }
}
