//! Analytic accountant for the unamplified Gaussian mechanism.
//!
//! Without batch randomness the balls-in-bins mechanism reduces to a single
//! Gaussian with L2 sensitivity `max_i ||m_i||`. Its `(eps, delta)` curve has a
//! closed form, which serves both as the upper end of the amplified bisection
//! bracket and as the "no amplification" comparison.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::matrix::{ParticipationSchema, StrategyMatrix};

const REL_TOL: f64 = 1e-6;
const MAX_BRACKET_STEPS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMechanismSpec {
    pub sensitivity: f64,
    pub sigma: f64,
}

impl GaussianMechanismSpec {
    pub fn new(sensitivity: f64, sigma: f64) -> Result<Self> {
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sensitivity {sensitivity} must be positive"
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma {sigma} must be positive"
            )));
        }
        Ok(Self { sensitivity, sigma })
    }
}

/// Standard normal CDF through `erfc`, accurate far into the lower tail.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `delta(eps) = Phi(D/2s - eps s/D) - e^eps Phi(-D/2s - eps s/D)`.
pub fn analytic_delta(eps: f64, spec: &GaussianMechanismSpec) -> f64 {
    let ratio = spec.sensitivity / spec.sigma;
    if ratio == 0.0 {
        return 0.0;
    }
    let shift = eps / ratio;
    let first = normal_cdf(0.5 * ratio - shift);
    let tail = normal_cdf(-0.5 * ratio - shift);
    let second = if tail > 0.0 {
        (eps + tail.ln()).exp()
    } else {
        0.0
    };
    (first - second).clamp(0.0, 1.0)
}

/// Smallest sigma (to relative tolerance 1e-6) with `analytic_delta <= delta`.
pub fn calibrate_gaussian_sigma(eps: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon {eps} must be finite and >= 0"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta {delta} must lie in (0, 1)"
        )));
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity {sensitivity} must be positive"
        )));
    }
    let delta_at = |sigma: f64| analytic_delta(eps, &GaussianMechanismSpec { sensitivity, sigma });

    let mut hi = sensitivity;
    let mut steps = 0;
    while delta_at(hi) > delta {
        hi *= 2.0;
        steps += 1;
        if steps > MAX_BRACKET_STEPS || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "delta {delta} unreachable at eps {eps}"
            )));
        }
    }
    let mut lo = hi;
    steps = 0;
    while delta_at(lo) <= delta {
        lo *= 0.5;
        steps += 1;
        if steps > MAX_BRACKET_STEPS || lo == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "delta {delta} unreachable at eps {eps}"
            )));
        }
    }
    while hi - lo > REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if delta_at(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Gaussian calibration with sensitivity `max_i ||m_i||` for the given matrix and schema.
pub fn calibrate_sigma_unamplified(
    eps: f64,
    delta: f64,
    c: &StrategyMatrix,
    schema: &ParticipationSchema,
) -> Result<f64> {
    calibrate_gaussian_sigma(eps, delta, c.unamplified_sensitivity(schema)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(sigma: f64) -> GaussianMechanismSpec {
        GaussianMechanismSpec::new(1.0, sigma).unwrap()
    }

    #[test]
    fn analytic_delta_reference_values() {
        assert!((analytic_delta(1.0, &unit(1.0)) - 0.126936).abs() < 1e-6);
        assert!((analytic_delta(0.0, &unit(1.0)) - 0.382925).abs() < 1e-6);
        assert!(analytic_delta(1.0, &unit(1e6)) < 1e-12);
    }

    #[test]
    fn analytic_delta_decreases_in_sigma_and_eps() {
        let mut prev = 1.0;
        for k in 1..40 {
            let d = analytic_delta(1.0, &unit(0.1 * k as f64));
            assert!(d < prev);
            prev = d;
        }
        let mut prev = 1.0;
        for k in 0..40 {
            let d = analytic_delta(0.25 * k as f64, &unit(1.0));
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn calibration_inverts_the_curve() {
        let sigma = calibrate_gaussian_sigma(1.0, 0.126936, 1.0).unwrap();
        assert!((sigma - 1.0).abs() < 1e-3);
        let doubled = calibrate_gaussian_sigma(1.0, 0.126936, 2.0).unwrap();
        assert_eq!(doubled, 2.0 * sigma);
    }

    #[test]
    fn calibration_at_small_delta() {
        let sigma = calibrate_gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
        assert!((sigma - 3.7306).abs() < 1e-3, "{sigma}");
    }

    #[test]
    fn calibration_rejects_bad_targets() {
        assert!(calibrate_gaussian_sigma(1.0, 0.0, 1.0).is_err());
        assert!(calibrate_gaussian_sigma(1.0, 1.0, 1.0).is_err());
        assert!(calibrate_gaussian_sigma(-1.0, 1e-5, 1.0).is_err());
    }

    #[test]
    fn unamplified_uses_max_mode_norm() {
        let c = StrategyMatrix::identity(4).unwrap();
        let schema = ParticipationSchema::new(2, 2).unwrap();
        let direct = calibrate_gaussian_sigma(1.0, 1e-5, 2f64.sqrt()).unwrap();
        assert_eq!(
            calibrate_sigma_unamplified(1.0, 1e-5, &c, &schema).unwrap(),
            direct
        );
    }
}
