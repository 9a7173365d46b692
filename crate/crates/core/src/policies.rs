//! Inner-accuracy schedules `δ_k` (and the outer schedules `ζ_k` of the
//! accelerated method).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized as its CLI string, e.g. `"adaptive:1:1.5:1"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AccuracyPolicy {
    /// `δ_k = c`.
    Constant { c: f64 },
    /// `δ_k = c / k^α`.
    Power { c: f64, alpha: f64 },
    /// `δ₁` at the first step, then `δ_k = c·(F(x_{k−2}) − F(x_{k−1}))^α`.
    Adaptive { c: f64, alpha: f64, delta1: f64 },
}

pub const DEFAULT_DELTA1: f64 = 1.0;

impl AccuracyPolicy {
    pub fn constant(c: f64) -> Result<Self> {
        Self::Constant { c }.validated()
    }

    pub fn power(c: f64, alpha: f64) -> Result<Self> {
        Self::Power { c, alpha }.validated()
    }

    pub fn adaptive(c: f64, alpha: f64) -> Result<Self> {
        Self::Adaptive {
            c,
            alpha,
            delta1: DEFAULT_DELTA1,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let ok = match self {
            Self::Constant { c } => c.is_finite() && c >= 0.0,
            Self::Power { c, alpha } => {
                c.is_finite() && c >= 0.0 && alpha.is_finite() && alpha >= 0.0
            }
            Self::Adaptive { c, alpha, delta1 } => {
                c.is_finite() && c >= 0.0 && alpha.is_finite() && alpha > 0.0 && delta1 >= 0.0
            }
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::Config(format!("invalid accuracy policy {self}")))
        }
    }

    pub fn needs_history(&self) -> bool {
        matches!(self, Self::Adaptive { .. })
    }

    /// `δ_k` for `k ≥ 1`. `history` is `(F(x_{k−2}), F(x_{k−1}))`, required
    /// by the adaptive rule from `k = 2` on.
    pub fn next_delta(&self, k: usize, history: Option<(f64, f64)>) -> Result<f64> {
        if k == 0 {
            return Err(Error::contract("accuracy schedules are indexed from k = 1"));
        }
        match *self {
            Self::Constant { c } => Ok(c),
            Self::Power { c, alpha } => Ok(c / (k as f64).powf(alpha)),
            Self::Adaptive { delta1, .. } if k == 1 => Ok(delta1),
            Self::Adaptive { c, alpha, .. } => {
                let (older, newer) = history.ok_or_else(|| {
                    Error::contract(format!(
                        "adaptive schedule at k = {k} needs two objective values"
                    ))
                })?;
                let progress = older - newer;
                if progress < 0.0 || progress.is_nan() {
                    return Err(Error::contract(format!(
                        "objective increased ({older} -> {newer}); adaptive schedule needs a monotone method"
                    )));
                }
                Ok(c * progress.powf(alpha))
            }
        }
    }

    /// Deviations from the proven parameter ranges for a method of order
    /// `p`. Empty when the policy is covered by a convergence guarantee.
    pub fn warnings(&self, p: u32) -> Vec<String> {
        let pf = p as f64;
        let mut out = Vec::new();
        match *self {
            Self::Constant { c } => out.push(format!(
                "constant accuracy {c:e} only reaches an O({c:e}) neighbourhood of the optimum"
            )),
            Self::Power { alpha, .. } if alpha < pf + 1.0 => out.push(format!(
                "power schedule exponent {alpha} is below p + 1 = {}; the sublinear rate is not guaranteed",
                p + 1
            )),
            Self::Power { .. } => {}
            Self::Adaptive { c, alpha, .. } if alpha == 1.0 => {
                let bound = adaptive_linear_threshold(p);
                if !(c < bound) {
                    out.push(format!(
                        "adaptive constant c = {c} is not below {bound:.6e} required for exponent 1 at p = {p}"
                    ));
                }
            }
            Self::Adaptive { alpha, .. } if alpha == (pf + 1.0) / 2.0 => {}
            Self::Adaptive { alpha, .. } => out.push(format!(
                "adaptive exponent {alpha} is outside the analysed values 1 and (p+1)/2 = {}",
                (pf + 1.0) / 2.0
            )),
        }
        out
    }
}

/// Largest admissible `c` for the adaptive rule with exponent one:
/// `1/((p+2)·3^{p+1} − 1)`.
pub fn adaptive_linear_threshold(p: u32) -> f64 {
    1.0 / ((p as f64 + 2.0) * 3f64.powi(p as i32 + 1) - 1.0)
}

/// `ω_p = max{(p+1)²L_p/(p!·σ_{p+1}), 1}`.
pub fn condition_number(p: u32, lp: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(lp >= 0.0) {
        return Err(Error::contract(format!(
            "need L_p >= 0 and sigma > 0, got {lp}, {sigma}"
        )));
    }
    let pf = p as f64;
    let fact: f64 = (1..=p).map(|i| i as f64).product();
    Ok(((pf + 1.0).powi(2) * lp / (fact * sigma)).max(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CBound {
    /// `c` must stay strictly below this: `(p/(p+1))·ω^{−1/p}`.
    pub supremum: f64,
    /// Half the supremum.
    pub recommended: f64,
}

pub fn strong_convexity_c_bound(p: u32, omega: f64) -> Result<CBound> {
    if !(omega >= 1.0) {
        return Err(Error::contract(format!(
            "condition number must be >= 1, got {omega}"
        )));
    }
    if p == 0 {
        return Err(Error::contract("order p must be positive"));
    }
    let pf = p as f64;
    let supremum = pf / (pf + 1.0) * omega.powf(-1.0 / pf);
    Ok(CBound {
        supremum,
        recommended: 0.5 * supremum,
    })
}

impl fmt::Display for AccuracyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { c } => write!(f, "constant:{c}"),
            Self::Power { c, alpha } => write!(f, "power:{c}:{alpha}"),
            Self::Adaptive { c, alpha, delta1 } => write!(f, "adaptive:{c}:{alpha}:{delta1}"),
        }
    }
}

impl TryFrom<String> for AccuracyPolicy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AccuracyPolicy> for String {
    fn from(p: AccuracyPolicy) -> String {
        p.to_string()
    }
}

impl FromStr for AccuracyPolicy {
    type Err = Error;

    /// `constant:C`, `power:C:ALPHA`, `adaptive:C:ALPHA[:DELTA1]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("policy '{s}': '{}' is not a number", parts[i])))
        };
        let policy = match (parts[0].trim(), parts.len()) {
            ("constant", 2) => Self::Constant { c: num(1)? },
            ("power", 3) => Self::Power {
                c: num(1)?,
                alpha: num(2)?,
            },
            ("adaptive", 3) => Self::Adaptive {
                c: num(1)?,
                alpha: num(2)?,
                delta1: DEFAULT_DELTA1,
            },
            ("adaptive", 4) => Self::Adaptive {
                c: num(1)?,
                alpha: num(2)?,
                delta1: num(3)?,
            },
            _ => {
                return Err(Error::Config(format!(
                    "cannot parse policy '{s}'; expected constant:C, power:C:ALPHA or adaptive:C:ALPHA[:DELTA1]"
                )))
            }
        };
        policy.validated()
    }
}
