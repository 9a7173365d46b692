use std::fmt::Debug;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::NormOperator;

/// `μ/2‖y − center‖²`, the shape that the closed-form and spectral
/// subsolvers can absorb into their quadratic part.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTerm {
    pub mu: f64,
    pub center: DVector<f64>,
}

/// The simple convex part `ψ` of `F = f + ψ`. Every composite used here is
/// differentiable; norms are taken in the geometry of the problem.
pub trait Composite: Send + Sync + Debug {
    fn value(&self, norm: &NormOperator, x: &DVector<f64>) -> f64;

    fn gradient(&self, norm: &NormOperator, x: &DVector<f64>) -> DVector<f64>;

    fn hessian_vec(&self, norm: &NormOperator, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64>;

    /// `Some` when `ψ` is zero or a scaled squared norm.
    fn as_quadratic(&self, dim: usize) -> Option<QuadraticTerm>;

    /// Global uniform convexity parameter of the given degree, zero if none
    /// is known.
    fn uniform_convexity(&self, degree: u32) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompositePart {
    Zero,
    /// `μ/q ‖x − center‖^q`, `q ≥ 2`.
    PowerNorm {
        mu: f64,
        q: f64,
        center: Vec<f64>,
    },
    /// `μ/2 ‖x − center‖²`.
    Quadratic {
        mu: f64,
        center: Vec<f64>,
    },
}

impl CompositePart {
    pub fn power_norm(mu: f64, q: f64, center: DVector<f64>) -> Result<Self> {
        if !(mu >= 0.0) || !(q >= 2.0) {
            return Err(Error::contract(format!(
                "power_norm needs mu >= 0 and q >= 2 (got mu={mu}, q={q})"
            )));
        }
        Ok(CompositePart::PowerNorm {
            mu,
            q,
            center: center.as_slice().to_vec(),
        })
    }

    pub fn quadratic(mu: f64, center: DVector<f64>) -> Result<Self> {
        if !(mu >= 0.0) {
            return Err(Error::contract(format!(
                "quadratic needs mu >= 0 (got {mu})"
            )));
        }
        Ok(CompositePart::Quadratic {
            mu,
            center: center.as_slice().to_vec(),
        })
    }

    /// Uniform convexity of degree `p + 1` of the quadratic composite
    /// restricted to a ball of radius `radius`.
    pub fn ball_uniform_convexity(&self, p: u32, radius: f64) -> f64 {
        match self {
            CompositePart::Quadratic { mu, .. } => {
                (p as f64 + 1.0) * mu / (2f64.powi(p as i32) * radius.powi(p as i32 - 1))
            }
            _ => self.uniform_convexity(p + 1),
        }
    }

    fn offset(center: &[f64], x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(center.len(), x.len());
        DVector::from_fn(x.len(), |i, _| x[i] - center[i])
    }
}

impl Composite for CompositePart {
    fn value(&self, norm: &NormOperator, x: &DVector<f64>) -> f64 {
        match self {
            CompositePart::Zero => 0.0,
            CompositePart::PowerNorm { mu, q, center } => {
                let r = norm.norm(&Self::offset(center, x));
                mu / q * r.powf(*q)
            }
            CompositePart::Quadratic { mu, center } => {
                let r = norm.norm(&Self::offset(center, x));
                0.5 * mu * r * r
            }
        }
    }

    fn gradient(&self, norm: &NormOperator, x: &DVector<f64>) -> DVector<f64> {
        match self {
            CompositePart::Zero => DVector::zeros(x.len()),
            CompositePart::PowerNorm { mu, q, center } => {
                let d = Self::offset(center, x);
                let bd = norm.apply(&d);
                let r = d.dot(&bd).max(0.0).sqrt();
                if r == 0.0 {
                    return DVector::zeros(x.len());
                }
                bd * (mu * r.powf(q - 2.0))
            }
            CompositePart::Quadratic { mu, center } => norm.apply(&Self::offset(center, x)) * *mu,
        }
    }

    fn hessian_vec(&self, norm: &NormOperator, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        match self {
            CompositePart::Zero => DVector::zeros(x.len()),
            CompositePart::PowerNorm { mu, q, center } => {
                let d = Self::offset(center, x);
                let bd = norm.apply(&d);
                let r = d.dot(&bd).max(0.0).sqrt();
                let bh = norm.apply(h);
                if r == 0.0 {
                    return if *q == 2.0 {
                        bh * *mu
                    } else {
                        DVector::zeros(x.len())
                    };
                }
                let radial = (q - 2.0) * r.powf(q - 4.0) * bd.dot(h);
                bh * (mu * r.powf(q - 2.0)) + bd * (mu * radial)
            }
            CompositePart::Quadratic { mu, .. } => norm.apply(h) * *mu,
        }
    }

    fn as_quadratic(&self, dim: usize) -> Option<QuadraticTerm> {
        match self {
            CompositePart::Zero => Some(QuadraticTerm {
                mu: 0.0,
                center: DVector::zeros(dim),
            }),
            CompositePart::Quadratic { mu, center } => Some(QuadraticTerm {
                mu: *mu,
                center: DVector::from_column_slice(center),
            }),
            CompositePart::PowerNorm { mu, q, center } if *q == 2.0 => Some(QuadraticTerm {
                mu: *mu,
                center: DVector::from_column_slice(center),
            }),
            CompositePart::PowerNorm { .. } => None,
        }
    }

    fn uniform_convexity(&self, degree: u32) -> f64 {
        match self {
            CompositePart::Zero => 0.0,
            CompositePart::PowerNorm { mu, q, .. } if *q == degree as f64 => {
                // σ_{p+1} = μ·2^{1−p} with p + 1 = q
                mu * 2f64.powf(2.0 - q)
            }
            CompositePart::PowerNorm { .. } => 0.0,
            CompositePart::Quadratic { mu, .. } if degree == 2 => *mu,
            CompositePart::Quadratic { .. } => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_at_center() {
        let b = NormOperator::identity(3);
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        for part in [
            CompositePart::power_norm(2.0, 3.0, c.clone()).unwrap(),
            CompositePart::quadratic(2.0, c.clone()).unwrap(),
        ] {
            assert_eq!(part.value(&b, &c), 0.0);
            assert_eq!(part.gradient(&b, &c).amax(), 0.0);
        }
    }

    #[test]
    fn power_norm_sigma_matches_example() {
        let part = CompositePart::power_norm(3.0, 3.0, DVector::zeros(2)).unwrap();
        assert_eq!(part.uniform_convexity(3), 1.5);
        let quad = CompositePart::quadratic(2.0, DVector::zeros(2)).unwrap();
        // (p+1)μ/(2^p D^{p−1}) with p = 2, D = 4
        assert_eq!(quad.ball_uniform_convexity(2, 4.0), 3.0 * 2.0 / (4.0 * 4.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CompositePart::power_norm(1.0, 1.5, DVector::zeros(1)).is_err());
        assert!(CompositePart::quadratic(-1.0, DVector::zeros(1)).is_err());
    }

    proptest! {
        #[test]
        fn power_norm_is_uniformly_convex(
            x in prop::collection::vec(-3.0f64..3.0, 3),
            y in prop::collection::vec(-3.0f64..3.0, 3),
            mu in 0.1f64..4.0,
        ) {
            let b = NormOperator::diagonal(DVector::from_vec(vec![1.0, 2.0, 0.5])).unwrap();
            let x = DVector::from_vec(x);
            let y = DVector::from_vec(y);
            let part = CompositePart::power_norm(mu, 3.0, DVector::from_vec(vec![0.3, -0.2, 1.0])).unwrap();
            let sigma = mu * 2f64.powi(1 - 2);
            let lhs = part.value(&b, &y) - part.value(&b, &x) - part.gradient(&b, &x).dot(&(&y - &x));
            let rhs = sigma / 3.0 * b.norm(&(&y - &x)).powi(3);
            prop_assert!(lhs >= rhs - 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
