use nalgebra::{DMatrix, DVector};

use super::DesignMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub names: Vec<String>,
    pub beta: DVector<f64>,
    /// Residual variance, weighted RSS / (n - p).
    pub sigma2: f64,
    /// `sigma2 * (X'WX)^-1`.
    pub cov_model: DMatrix<f64>,
    /// Cluster-robust covariance, when requested.
    pub cov_robust: Option<DMatrix<f64>>,
    pub residuals: DVector<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
}

impl LinearFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.beta[j])
    }

    /// Attaches the cluster-robust covariance computed on the same design.
    pub fn with_robust(mut self, x: &DesignMatrix, y: &[f64]) -> Result<Self> {
        self.cov_robust = Some(sandwich_covariance(x, y, &self.beta)?);
        Ok(self)
    }
}

fn check_dims(x: &DesignMatrix, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows but response has {}",
            x.nrows(),
            y.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite response at row {i}")));
    }
    Ok(())
}

/// Inverse of the triangular factor R of `a = QR`. The caller has already
/// checked the column rank.
fn r_inverse(r: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let p = r.ncols();
    r.solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Singular {
            rank: 0,
            ncols: p,
            columns: names.to_vec(),
        })
}

/// Ordinary (or weighted) least squares.
pub fn ols(x: &DesignMatrix, y: &[f64], weights: Option<&[f64]>) -> Result<LinearFit> {
    check_dims(x, y)?;
    if let Some(w) = weights {
        if w.len() != y.len() {
            return Err(Error::Dimension(format!("{} weights for {} rows", w.len(), y.len())));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
    }
    x.check_rank(weights)?;
    let n = x.nrows();
    let p = x.ncols();
    let scale: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let a = DMatrix::from_fn(n, p, |i, j| x.matrix()[(i, j)] * scale[i]);
    let b = DVector::from_fn(n, |i, _| y[i] * scale[i]);
    let qr = a.qr();
    let r = qr.r();
    let qtb = qr.q().transpose() * &b;
    let r_inv = r_inverse(&r, x.names())?;
    let beta = &r_inv * qtb.rows(0, p);

    let yv = DVector::from_column_slice(y);
    let residuals = &yv - x.matrix() * &beta;
    let n_eff = match weights {
        Some(w) => w.iter().filter(|v| **v > 0.0).count(),
        None => n,
    };
    let rss: f64 = residuals
        .iter()
        .zip(&scale)
        .map(|(r, s)| (r * s) * (r * s))
        .sum();
    let sigma2 = if n_eff > p { rss / (n_eff - p) as f64 } else { 0.0 };
    let cov_model = symmetrize(&r_inv * r_inv.transpose() * sigma2);

    Ok(LinearFit {
        names: x.names().to_vec(),
        beta,
        sigma2,
        cov_model,
        cov_robust: None,
        residuals,
        n_obs: n,
        n_clusters: x.n_clusters(),
    })
}

/// Cluster-robust covariance `(X'X)^-1 [sum_c (X_c' r_c)(X_c' r_c)'] (X'X)^-1`
/// with clusters taken from the design's cluster ids.
pub fn sandwich_covariance(x: &DesignMatrix, y: &[f64], beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dims(x, y)?;
    if beta.len() != x.ncols() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} columns",
            beta.len(),
            x.ncols()
        )));
    }
    x.check_rank(None)?;
    let r = x.matrix().clone().qr().r();
    let r_inv = r_inverse(&r, x.names())?;
    let bread = &r_inv * r_inv.transpose();
    let p = x.ncols();
    let m = x.matrix();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    let mut score = DVector::<f64>::zeros(p);
    for (_, rows) in x.cluster_rows() {
        score.fill(0.0);
        for &i in &rows {
            let fitted: f64 = (0..p).map(|j| m[(i, j)] * beta[j]).sum();
            let r = y[i] - fitted;
            for j in 0..p {
                score[j] += m[(i, j)] * r;
            }
        }
        meat.ger(1.0, &score, &score, 1.0);
    }
    Ok(symmetrize(&bread * meat * &bread))
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}
