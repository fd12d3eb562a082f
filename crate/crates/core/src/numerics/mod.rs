//! Dense numerical kernel: design matrices, (weighted) least squares,
//! cluster-robust sandwich covariance, logistic regression by IRLS and
//! maximum-likelihood fitting of the random intercept + slope linear mixed
//! model.
//!
//! Every routine is a pure function of its inputs.

mod design;
mod lmm;
pub(crate) mod logistic;
mod ols;
pub mod optim;

pub use design::DesignMatrix;
pub use lmm::{lmm_fit, lmm_predict, LmmFit, LmmOptions, LmmProblem};
pub use logistic::{logistic_fit, logistic_loglik, LogisticFit, LogisticOptions};
pub use ols::{ols, sandwich_covariance, LinearFit};

use nalgebra::DMatrix;

/// Largest absolute asymmetry of a square matrix.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}
