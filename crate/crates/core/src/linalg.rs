//! Geometry of the primal and dual spaces induced by a fixed symmetric
//! positive definite operator `B`.
//!
//! Primal vectors are measured by `‖x‖ = ⟨Bx, x⟩^{1/2}` and dual vectors
//! (gradients) by `‖s‖_* = ⟨s, B⁻¹s⟩^{1/2}`. The operator is immutable once
//! built; the dense kind keeps its Cholesky factor so that every dual norm
//! and preconditioned step is a pair of triangular solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const PIVOT_RATIO_TOL: f64 = 1e-14;

#[derive(Clone, Debug)]
enum Kind {
    Identity,
    Diagonal(DVector<f64>),
    Dense {
        matrix: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

/// Symmetric positive definite operator `B: E → E*`.
#[derive(Clone, Debug)]
pub struct NormOperator {
    dim: usize,
    kind: Kind,
}

impl NormOperator {
    pub fn identity(dim: usize) -> Self {
        NormOperator {
            dim,
            kind: Kind::Identity,
        }
    }

    pub fn diagonal(entries: DVector<f64>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::contract(format!(
                "diagonal norm operator needs positive finite entries, found {bad}"
            )));
        }
        Ok(NormOperator {
            dim: entries.len(),
            kind: Kind::Diagonal(entries),
        })
    }

    /// Dense SPD operator. The input is symmetrized after a relative
    /// symmetry check, so the stored matrix is exactly symmetric.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::contract("norm operator must be square"));
        }
        check_symmetric(&matrix)?;
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let dim = matrix.nrows();
        let chol = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::Factorization("norm operator is not positive definite".into()))?;
        let l = chol.l_dirty();
        let max_diag = matrix.diagonal().amax();
        let min_pivot = (0..dim)
            .map(|i| l[(i, i)] * l[(i, i)])
            .fold(f64::INFINITY, f64::min);
        if !(min_pivot > PIVOT_RATIO_TOL * max_diag) {
            return Err(Error::Factorization(format!(
                "norm operator is numerically singular (pivot ratio {:e})",
                min_pivot / max_diag
            )));
        }
        Ok(NormOperator {
            dim,
            kind: Kind::Dense { matrix, chol },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, Kind::Identity)
    }

    /// Dense matrix form of `B` (materialized for identity and diagonal kinds).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match &self.kind {
            Kind::Identity => DMatrix::identity(self.dim, self.dim),
            Kind::Diagonal(d) => DMatrix::from_diagonal(d),
            Kind::Dense { matrix, .. } => matrix.clone(),
        }
    }

    /// `B x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Kind::Identity => x.clone(),
            Kind::Diagonal(d) => d.component_mul(x),
            Kind::Dense { matrix, .. } => matrix * x,
        }
    }

    /// `B⁻¹ s`.
    pub fn solve(&self, s: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Kind::Identity => s.clone(),
            Kind::Diagonal(d) => s.component_div(d),
            Kind::Dense { chol, .. } => chol.solve(s),
        }
    }

    pub fn primal_norm(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.norm(x))
    }

    pub fn dual_norm(&self, s: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, s.len())?;
        Ok(self.dual(s))
    }

    /// Unchecked primal norm; dimensions are the caller's responsibility.
    pub(crate) fn norm(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            Kind::Identity => x.norm(),
            Kind::Diagonal(d) => d
                .iter()
                .zip(x.iter())
                .map(|(b, v)| b * v * v)
                .sum::<f64>()
                .sqrt(),
            Kind::Dense { matrix, .. } => x.dot(&(matrix * x)).max(0.0).sqrt(),
        }
    }

    /// Unchecked dual norm.
    pub(crate) fn dual(&self, s: &DVector<f64>) -> f64 {
        match &self.kind {
            Kind::Identity => s.norm(),
            Kind::Diagonal(d) => d
                .iter()
                .zip(s.iter())
                .map(|(b, v)| v * v / b)
                .sum::<f64>()
                .sqrt(),
            Kind::Dense { .. } => self.whiten_dual(s).norm(),
        }
    }

    /// `L⁻¹ s` where `B = L Lᵀ`; the Euclidean norm of the result is `‖s‖_*`.
    pub fn whiten_dual(&self, s: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Kind::Identity => s.clone(),
            Kind::Diagonal(d) => s.component_div(&d.map(f64::sqrt)),
            Kind::Dense { chol, .. } => chol
                .l_dirty()
                .solve_lower_triangular(s)
                .expect("cholesky factor has a nonzero diagonal"),
        }
    }

    /// `L⁻ᵀ u`: maps whitened coordinates back to the primal space.
    pub fn unwhiten_primal(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Kind::Identity => u.clone(),
            Kind::Diagonal(d) => u.component_div(&d.map(f64::sqrt)),
            Kind::Dense { chol, .. } => chol
                .l_dirty()
                .tr_solve_lower_triangular(u)
                .expect("cholesky factor has a nonzero diagonal"),
        }
    }

    /// `L⁻¹ A L⁻ᵀ`, the operator `A` expressed in whitened coordinates.
    pub fn whiten_operator(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            Kind::Identity => a.clone(),
            Kind::Diagonal(d) => {
                let s = d.map(|v| 1.0 / v.sqrt());
                DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * s[i] * s[j])
            }
            Kind::Dense { chol, .. } => {
                let l = chol.l_dirty();
                let left = l
                    .solve_lower_triangular(a)
                    .expect("cholesky factor has a nonzero diagonal");
                let both = l
                    .solve_lower_triangular(&left.transpose())
                    .expect("cholesky factor has a nonzero diagonal");
                let both = both.transpose();
                (&both + both.transpose()) * 0.5
            }
        }
    }
}

/// Spectral decomposition of a symmetric matrix with ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Columns are orthonormal eigenvectors, ordered like `values`.
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigendecomposition(a: &DMatrix<f64>) -> Result<SymEigen> {
    if !a.is_square() {
        return Err(Error::contract("eigendecomposition needs a square matrix"));
    }
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigen { values, vectors })
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::contract(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}
