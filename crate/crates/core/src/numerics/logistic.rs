use nalgebra::{DMatrix, DVector};

use super::ols::symmetrize;
use super::DesignMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest coefficient change.
    pub tol: f64,
    /// Coefficient max-norm beyond which the fit is declared separated.
    pub divergence_norm: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iter: 100,
            tol: 1e-10,
            divergence_norm: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub names: Vec<String>,
    /// Log-odds coefficients.
    pub beta: DVector<f64>,
    /// Inverse of the observed information at `beta`.
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticFit {
    /// Fitted probability for a covariate row laid out like the design.
    pub fn probability(&self, row: &[f64]) -> f64 {
        let eta: f64 = row.iter().zip(self.beta.iter()).map(|(x, b)| x * b).sum();
        sigmoid(eta)
    }
}

pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(eta)) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood with logit link.
pub fn logistic_loglik(x: &DMatrix<f64>, d: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter().zip(d).map(|(e, di)| di * e - softplus(*e)).sum()
}

/// Logistic regression by iteratively reweighted least squares with
/// step-halving, so the log-likelihood never decreases between iterations.
pub fn logistic_fit(x: &DesignMatrix, d: &[f64], opts: &LogisticOptions) -> Result<LogisticFit> {
    let n = x.nrows();
    let p = x.ncols();
    if d.len() != n {
        return Err(Error::Dimension(format!("{} outcomes for {} rows", d.len(), n)));
    }
    if d.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidInput("logistic outcomes must be 0 or 1".into()));
    }
    if !d.contains(&0.0) || !d.contains(&1.0) {
        return Err(Error::InvalidInput(
            "logistic outcome needs at least one 0 and one 1".into(),
        ));
    }
    x.check_rank(None)?;

    let m = x.matrix();
    let mut beta = DVector::<f64>::zeros(p);
    let mut ll = logistic_loglik(m, d, &beta);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let (score, info) = score_and_information(m, d, &beta);
        let Some(chol) = info.clone().cholesky() else {
            return Err(information_failure(m, &beta));
        };
        let step = chol.solve(&score);

        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut ll_new = logistic_loglik(m, d, &candidate);
        let mut halvings = 0;
        while !(ll_new >= ll) && halvings < 40 {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            ll_new = logistic_loglik(m, d, &candidate);
            halvings += 1;
        }
        if !(ll_new >= ll) {
            // no ascent possible along the Newton direction
            converged = step.amax() * scale < opts.tol.sqrt();
            break;
        }
        let change = (&candidate - &beta).amax();
        beta = candidate;
        ll = ll_new;

        if beta.amax() > opts.divergence_norm {
            return Err(Error::Separation { norm: beta.amax() });
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    if !converged && pinned(m, &beta) {
        return Err(Error::Separation { norm: beta.amax() });
    }

    let (_, info) = score_and_information(m, d, &beta);
    let Some(cov) = info.try_inverse().map(symmetrize) else {
        return Err(information_failure(m, &beta));
    };

    Ok(LogisticFit {
        names: x.names().to_vec(),
        beta,
        cov,
        loglik: ll,
        converged,
        iterations,
    })
}

/// Fitted probabilities pinned at 0 or 1: the likelihood has no finite maximizer.
fn pinned(m: &DMatrix<f64>, beta: &DVector<f64>) -> bool {
    (m * beta).iter().any(|e| e.abs() > 30.0)
}

fn information_failure(m: &DMatrix<f64>, beta: &DVector<f64>) -> Error {
    if pinned(m, beta) {
        Error::Separation { norm: beta.amax() }
    } else {
        Error::NotPositiveDefinite("logistic information matrix".into())
    }
}

fn score_and_information(m: &DMatrix<f64>, d: &[f64], beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let p = m.ncols();
    let eta = m * beta;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for i in 0..m.nrows() {
        let pr = sigmoid(eta[i]);
        let w = pr * (1.0 - pr);
        let r = d[i] - pr;
        for a in 0..p {
            let xa = m[(i, a)];
            score[a] += xa * r;
            for b in 0..=a {
                info[(a, b)] += w * xa * m[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    (score, info)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_only(d: &[f64]) -> DesignMatrix {
        DesignMatrix::unclustered(&["intercept"], DMatrix::from_element(d.len(), 1, 1.0)).unwrap()
    }

    fn with_covariate(x: &[f64]) -> DesignMatrix {
        DesignMatrix::unclustered(&["intercept", "x"], DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] }))
            .unwrap()
    }

    #[test]
    fn intercept_only_is_logit_of_mean() {
        let d = [1.0, 1.0, 0.0, 0.0];
        let fit = logistic_fit(&intercept_only(&d), &d, &Default::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.beta[0].abs() < 1e-12);

        let d = [1.0, 1.0, 1.0, 0.0];
        let fit = logistic_fit(&intercept_only(&d), &d, &Default::default()).unwrap();
        assert!((fit.beta[0] - 3f64.ln()).abs() < 1e-10);
        // 1 / (n p (1 - p))
        assert!((fit.cov[(0, 0)] - 1.0 / (4.0 * 0.75 * 0.25)).abs() < 1e-9);
    }

    // Golden-section search along each axis, cycled until stable, on the
    // exact log-likelihood.
    fn grid_maximize(x: &DMatrix<f64>, d: &[f64]) -> DVector<f64> {
        let f = |b0: f64, b1: f64| logistic_loglik(x, d, &DVector::from_vec(vec![b0, b1]));
        // coarse grid first
        let (mut b0, mut b1, mut best) = (0.0, 0.0, f64::NEG_INFINITY);
        for i in -100..=100 {
            for j in -100..=100 {
                let (a, b) = (i as f64 * 0.1, j as f64 * 0.1);
                let v = f(a, b);
                if v > best {
                    best = v;
                    b0 = a;
                    b1 = b;
                }
            }
        }
        let golden = |g: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64| {
            let r = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let c = hi - r * (hi - lo);
                let e = lo + r * (hi - lo);
                if g(c) > g(e) {
                    hi = e;
                } else {
                    lo = c;
                }
            }
            0.5 * (lo + hi)
        };
        for _ in 0..200 {
            b0 = golden(&|a| f(a, b1), b0 - 0.5, b0 + 0.5);
            b1 = golden(&|b| f(b0, b), b1 - 0.5, b1 + 0.5);
        }
        DVector::from_vec(vec![b0, b1])
    }

    #[test]
    fn six_point_instance_matches_likelihood_grid() {
        let xs = [-1.5, -0.5, 0.0, 0.5, 1.0, 2.0];
        let d = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let x = with_covariate(&xs);
        let fit = logistic_fit(&x, &d, &Default::default()).unwrap();
        let oracle = grid_maximize(x.matrix(), &d);
        assert!((&fit.beta - &oracle).amax() < 1e-4, "{} vs {}", fit.beta, oracle);
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let xs: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let d: Vec<f64> = xs.iter().enumerate().map(|(i, v)| if v + ((i * 7) % 5) as f64 - 2.0 > 0.0 { 1.0 } else { 0.0 }).collect();
        let x = with_covariate(&xs);
        let fit = logistic_fit(&x, &d, &Default::default()).unwrap();
        assert!(fit.converged);
        let (score, _) = score_and_information(x.matrix(), &d, &fit.beta);
        assert!(score.amax() < 1e-8);
    }

    #[test]
    fn loglik_monotone_over_iterations() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 3.0 - 5.0).collect();
        let d: Vec<f64> = xs.iter().enumerate().map(|(i, v)| if *v > 0.0 || i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let x = with_covariate(&xs);
        let mut last = f64::NEG_INFINITY;
        for k in 1..=12 {
            let opts = LogisticOptions { max_iter: k, ..Default::default() };
            let fit = logistic_fit(&x, &d, &opts).unwrap();
            assert!(fit.loglik >= last - 1e-12);
            last = fit.loglik;
        }
    }

    #[test]
    fn separation_detected() {
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let d = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let err = logistic_fit(&with_covariate(&xs), &d, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err:?}");
        assert!(err.is_numerical());
    }

    #[test]
    fn rejects_bad_outcomes() {
        let d = [1.0, 1.0];
        assert!(logistic_fit(&intercept_only(&d), &d, &Default::default()).is_err());
        let d = [1.0, 0.5];
        assert!(logistic_fit(&intercept_only(&d), &d, &Default::default()).is_err());
    }
}
