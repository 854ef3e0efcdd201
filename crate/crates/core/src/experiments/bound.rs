//! Generalization bound envelope `S^{-2/(4+m)} (kappa/(2m) + c1 + c2/sqrt(delta))`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

pub fn bound_envelope(
    kappa: f64,
    samples: f64,
    m: f64,
    c1: f64,
    c2: f64,
    delta: f64,
) -> Result<f64> {
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(validation("kappa must be finite and non-negative"));
    }
    if !samples.is_finite() || samples < 1.0 {
        return Err(validation("sample size must be at least 1"));
    }
    if !m.is_finite() || m < 1.0 {
        return Err(validation("feature dimension must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(validation("delta must lie in (0, 1)"));
    }
    if !(c1 >= 0.0 && c2 >= 0.0) || !c1.is_finite() || !c2.is_finite() {
        return Err(validation("constants must be finite and non-negative"));
    }
    Ok(rate(samples, m) * (kappa / (2.0 * m) + c1 + c2 / delta.sqrt()))
}

fn rate(samples: f64, m: f64) -> f64 {
    samples.powf(-2.0 / (4.0 + m))
}

/// Constants fitted on one half of a sweep and checked on the other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c1: f64,
    pub c2: f64,
    pub method: String,
    pub calibration_n: usize,
    pub holdout_n: usize,
    /// Fraction of held-out gaps at or below their envelope.
    pub coverage: f64,
}

/// Fits `c2 = 0` and the smallest `c1 >= 0` whose envelope reaches every gap
/// in a seeded random half of `(kappa, gap)` pairs, then reports coverage on
/// the other half.
pub fn calibrate_envelope(
    points: &[(f64, f64)],
    samples: f64,
    m: f64,
    delta: f64,
    seed: u64,
) -> Result<Calibration> {
    if points.len() < 2 {
        return Err(validation("calibration needs at least two points"));
    }
    if points.iter().any(|(k, g)| !k.is_finite() || !g.is_finite()) {
        return Err(validation("calibration points must be finite"));
    }
    bound_envelope(0.0, samples, m, 0.0, 0.0, delta)?;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (cal, hold) = order.split_at(points.len() / 2);
    let r = rate(samples, m);
    let c1 = cal
        .iter()
        .map(|&i| {
            let (kappa, gap) = points[i];
            gap / r - kappa.max(0.0) / (2.0 * m)
        })
        .fold(0.0, f64::max);
    let covered = hold
        .iter()
        .filter(|&&i| {
            let (kappa, gap) = points[i];
            bound_envelope(kappa.max(0.0), samples, m, c1, 0.0, delta).is_ok_and(|env| gap <= env)
        })
        .count();
    Ok(Calibration {
        c1,
        c2: 0.0,
        method: "c2 = 0; c1 = max over a random calibration half of gap / S^(-2/(4+m)) - kappa/(2m), floored at 0".into(),
        calibration_n: cal.len(),
        holdout_n: hold.len(),
        coverage: covered as f64 / hold.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn examples() {
        let v = bound_envelope(8.0, 100.0, 4.0, 1.0, 1.0, 0.25).unwrap();
        assert!((v - 4.0 / 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(bound_envelope(0.0, 100.0, 4.0, 0.0, 0.0, 0.5).unwrap(), 0.0);
        let a = bound_envelope(3.0, 50.0, 6.0, 0.2, 0.1, 0.1).unwrap();
        let b = bound_envelope(3.0, 100.0, 6.0, 0.2, 0.1, 0.1).unwrap();
        assert_relative_eq!(b / a, 2f64.powf(-0.2), max_relative = 1e-12);
    }

    #[test]
    fn domain_errors() {
        assert!(bound_envelope(1.0, 0.5, 4.0, 0.0, 0.0, 0.5).is_err());
        assert!(bound_envelope(1.0, 10.0, 0.0, 0.0, 0.0, 0.5).is_err());
        assert!(bound_envelope(1.0, 10.0, 4.0, -1.0, 0.0, 0.5).is_err());
        assert!(bound_envelope(1.0, 10.0, 4.0, 0.0, 0.0, 1.0).is_err());
        assert!(bound_envelope(-1.0, 10.0, 4.0, 0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn calibration_covers_its_own_half() {
        let pts: Vec<(f64, f64)> = (0..40).map(|i| (i as f64, 0.01 * (i % 7) as f64)).collect();
        let c = calibrate_envelope(&pts, 200.0, 10.0, 0.5, 3).unwrap();
        assert_eq!(c.calibration_n + c.holdout_n, 40);
        assert!(c.c1 >= 0.0 && c.coverage >= 0.0 && c.coverage <= 1.0);
        let again = calibrate_envelope(&pts, 200.0, 10.0, 0.5, 3).unwrap();
        assert_eq!(c, again);
    }
}
