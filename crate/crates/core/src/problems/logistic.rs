use nalgebra::{DMatrix, DVector};

use super::dataset::Dataset;
use super::oracle::SmoothOracle;
use crate::error::{Error, Result};

/// Max of `|ℓ'''|` for `ℓ(t) = log(1 + e^{−t})`, attained where
/// `σ(t) = 1/2 ± 1/(2√3)`.
const LOGISTIC_THIRD_DERIVATIVE_MAX: f64 = 0.096_225_044_864_937_63; // 1/(6√3)

/// ℓ2-regularized logistic loss
/// `f(x) = (1/m) Σ log(1 + exp(−yᵢ⟨aᵢ, x⟩)) + (l2/2)‖x‖₂²`.
///
/// Lipschitz constants are with respect to the standard Euclidean norm.
#[derive(Clone, Debug)]
pub struct LogisticOracle {
    data: Dataset,
    l2: f64,
    mean_row_norm_sq: f64,
    mean_row_norm_cubed: f64,
}

pub fn logistic_oracle(data: Dataset, l2: f64) -> Result<LogisticOracle> {
    if data.m() == 0 || data.n() == 0 {
        return Err(Error::contract("logistic oracle needs a non-empty dataset"));
    }
    if !(l2 >= 0.0) {
        return Err(Error::contract(format!("l2 must be nonnegative, got {l2}")));
    }
    let m = data.m() as f64;
    let norms: Vec<f64> = (0..data.m())
        .map(|i| data.features.row_norm_squared(i))
        .collect();
    let mean_row_norm_sq = norms.iter().sum::<f64>() / m;
    let mean_row_norm_cubed = norms.iter().map(|s| s * s.sqrt()).sum::<f64>() / m;
    Ok(LogisticOracle {
        data,
        l2,
        mean_row_norm_sq,
        mean_row_norm_cubed,
    })
}

fn softplus(u: f64) -> f64 {
    // log(1 + e^u)
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl LogisticOracle {
    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    fn margins(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.data.m())
            .map(|i| self.data.labels[i] * self.data.features.row_dot(i, x))
            .collect()
    }

    fn curvature_weights(&self, x: &DVector<f64>) -> Vec<f64> {
        self.margins(x)
            .into_iter()
            .map(|t| {
                let s = sigmoid(t);
                s * (1.0 - s)
            })
            .collect()
    }
}

impl SmoothOracle for LogisticOracle {
    fn dim(&self) -> usize {
        self.data.n()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let m = self.data.m() as f64;
        let loss: f64 = self.margins(x).into_iter().map(|t| softplus(-t)).sum();
        loss / m + 0.5 * self.l2 * x.norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.value_gradient(x).1
    }

    fn value_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = self.data.m() as f64;
        let mut g = x * self.l2;
        let mut loss = 0.0;
        for (i, t) in self.margins(x).into_iter().enumerate() {
            loss += softplus(-t);
            let coef = -self.data.labels[i] * sigmoid(-t) / m;
            self.data.features.row_axpy(i, coef, &mut g);
        }
        (loss / m + 0.5 * self.l2 * x.norm_squared(), g)
    }

    fn hessian_vec(&self, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        let m = self.data.m() as f64;
        let mut out = h * self.l2;
        for (i, w) in self.curvature_weights(x).into_iter().enumerate() {
            let ah = self.data.features.row_dot(i, h);
            self.data.features.row_axpy(i, w * ah / m, &mut out);
        }
        out
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.data.n();
        let m = self.data.m() as f64;
        let mut hess = DMatrix::identity(n, n) * self.l2;
        for (i, w) in self.curvature_weights(x).into_iter().enumerate() {
            let row: Vec<(usize, f64)> = self.data.features.row(i).collect();
            for &(a, va) in &row {
                for &(b, vb) in &row {
                    hess[(a, b)] += w * va * vb / m;
                }
            }
        }
        Some(hess)
    }

    fn lipschitz(&self, p: u32) -> Option<f64> {
        match p {
            1 => Some(0.25 * self.mean_row_norm_sq + self.l2),
            2 => Some(LOGISTIC_THIRD_DERIVATIVE_MAX * self.mean_row_norm_cubed),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::dataset::{synthetic_classification, SparseRows};

    #[test]
    fn value_at_origin_is_log_two() {
        let data = synthetic_classification(5, 40, 3).unwrap();
        let f = logistic_oracle(data, 0.7).unwrap();
        assert!((f.value(&DVector::zeros(5)) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn scalar_identity() {
        let feats = SparseRows::from_rows(1, vec![vec![(0, 1.0)]]).unwrap();
        let f = logistic_oracle(Dataset::new(feats, vec![1.0], "one").unwrap(), 0.0).unwrap();
        for t in [-3.0, -0.5, 0.0, 1.2, 30.0] {
            let x = DVector::from_element(1, t);
            assert!((f.value(&x) - (1.0 + (-t).exp()).ln()).abs() < 1e-14);
            assert!((f.gradient(&x)[0] + 1.0 / (1.0 + t.exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let feats = SparseRows::from_rows(3, vec![]).unwrap();
        let data = Dataset::new(feats, vec![], "empty").unwrap();
        assert!(logistic_oracle(data, 0.0).is_err());
    }

    #[test]
    fn dense_hessian_matches_products() {
        let data = synthetic_classification(6, 30, 9).unwrap();
        let f = logistic_oracle(data, 1e-2).unwrap();
        let x = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.7);
        let h = DVector::from_fn(6, |i, _| (i as f64).sin());
        let dense = f.hessian(&x).unwrap() * &h;
        assert!((dense - f.hessian_vec(&x, &h)).amax() < 1e-14);
    }

    #[test]
    fn third_derivative_constant() {
        assert!((LOGISTIC_THIRD_DERIVATIVE_MAX - 1.0 / (6.0 * 3f64.sqrt())).abs() < 1e-17);
    }
}
