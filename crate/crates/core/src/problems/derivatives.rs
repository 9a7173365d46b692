use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::oracle::SmoothOracle;

pub const DERIVATIVE_TOLERANCE: f64 = 1e-4;

/// Maximum relative errors of analytic derivatives against central
/// differences.
#[derive(Clone, Debug, Serialize)]
pub struct DerivativeReport {
    pub trials: usize,
    pub max_gradient_error: f64,
    pub max_hessian_vec_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference step `ε^{1/3}(1 + ‖x‖)`.
pub fn fd_step(x: &DVector<f64>) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + x.norm())
}

fn relative_error(analytic: &DVector<f64>, fd: &DVector<f64>) -> f64 {
    let scale = analytic.amax().max(fd.amax()).max(1e-8);
    (analytic - fd).amax() / scale
}

pub fn gradient_error(oracle: &dyn SmoothOracle, x: &DVector<f64>) -> f64 {
    let t = fd_step(x);
    let fd = DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += t;
        xm[i] -= t;
        (oracle.value(&xp) - oracle.value(&xm)) / (2.0 * t)
    });
    relative_error(&oracle.gradient(x), &fd)
}

pub fn hessian_vec_error(oracle: &dyn SmoothOracle, x: &DVector<f64>, h: &DVector<f64>) -> f64 {
    let t = fd_step(x);
    let fd = (oracle.gradient(&(x + h * t)) - oracle.gradient(&(x - h * t))) / (2.0 * t);
    relative_error(&oracle.hessian_vec(x, h), &fd)
}

/// Samples `trials` points uniformly from `[−scale, scale]ⁿ` and unit
/// directions, and compares derivatives against central differences.
pub fn check_derivatives_scaled(
    oracle: &dyn SmoothOracle,
    trials: usize,
    seed: u64,
    scale: f64,
) -> DerivativeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = oracle.dim();
    let mut report = DerivativeReport {
        trials,
        max_gradient_error: 0.0,
        max_hessian_vec_error: 0.0,
        tolerance: DERIVATIVE_TOLERANCE,
        passed: true,
    };
    for _ in 0..trials.max(1) {
        let x: DVector<f64> = DVector::from_fn(n, |_, _| scale * rng.gen_range(-1.0..=1.0));
        let mut h: DVector<f64> = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
        h /= h.norm().max(f64::MIN_POSITIVE);
        report.max_gradient_error = report.max_gradient_error.max(gradient_error(oracle, &x));
        report.max_hessian_vec_error = report
            .max_hessian_vec_error
            .max(hessian_vec_error(oracle, &x, &h));
    }
    report.passed = report.max_gradient_error <= DERIVATIVE_TOLERANCE
        && report.max_hessian_vec_error <= DERIVATIVE_TOLERANCE;
    report
}

pub fn check_derivatives(oracle: &dyn SmoothOracle, trials: usize, seed: u64) -> DerivativeReport {
    check_derivatives_scaled(oracle, trials, seed, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::oracle::HalfSquaredNorm;

    #[test]
    fn quadratic_matches_to_truncation() {
        let r = check_derivatives(&HalfSquaredNorm { dim: 5 }, 10, 1);
        assert!(r.passed);
        assert!(r.max_gradient_error < 1e-9);
        assert!(r.max_hessian_vec_error < 1e-9);
    }

    struct Broken;
    impl SmoothOracle for Broken {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &DVector<f64>) -> f64 {
            x.norm_squared()
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn hessian_vec(&self, _x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
            h * 2.0
        }
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = check_derivatives(&Broken, 3, 0);
        assert!(!r.passed);
        assert!(r.max_gradient_error > 0.4);
    }
}
