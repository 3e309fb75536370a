//! Small dense helpers on top of nalgebra.

use crate::Matrix;
use nalgebra::SymmetricEigen;

pub(crate) fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn trace(m: &Matrix) -> f64 {
    m.diagonal().sum()
}

pub(crate) fn max_abs_asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Largest singular value.
#[cfg(test)]
pub(crate) fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Cached symmetric eigendecomposition `Q diag(λ) Qᵀ`, used to evaluate
/// functions of a symmetric matrix that all share its eigenvectors.
#[derive(Debug, Clone)]
pub(crate) struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    pub fn new(m: &Matrix) -> Self {
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        Self {
            values: eig.eigenvalues.iter().cloned().collect(),
            vectors: eig.eigenvectors,
        }
    }

    /// `Q diag(f(λ_i)) Qᵀ`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            let s = f(l);
            for i in 0..d {
                scaled[(i, j)] *= s;
            }
        }
        scaled * self.vectors.transpose()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}
