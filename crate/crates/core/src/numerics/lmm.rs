//! Maximum-likelihood fit of the linear mixed model
//!
//! `y_c = X_c beta + Z_c b_c + e_c`, `b_c ~ N(0, G)`, `e_c ~ N(0, sigma2 I)`
//!
//! with two random effects per cluster (typically intercept and time).
//! `G = sigma2 * L L'` where `L` is lower triangular with log-scaled diagonal,
//! so `theta = (ln l11, l21, ln l22)` ranges over all of R^3 and `G` stays
//! positive semidefinite. For fixed `theta`, `beta` and `sigma2` have closed
//! forms (generalized least squares), leaving a 3-parameter profiled deviance.
//!
//! Cluster inverses use the identity
//! `(I + Z L L'Z')^-1 = I - Z L (I + L'Z'Z L)^-1 L'Z'`, so each cluster only
//! needs its 2x2 cross products.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2xX, Vector2};

use super::optim::{nelder_mead, NelderMeadOptions};
use super::{ols, DesignMatrix};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmmOptions {
    /// Convergence threshold on the deviance change between restarts.
    pub tol: f64,
    /// Budget of deviance evaluations.
    pub max_evals: usize,
    /// Bound on the log-scaled Cholesky diagonal. Hitting it flags a boundary fit.
    pub log_bound: f64,
}

impl Default for LmmOptions {
    fn default() -> Self {
        LmmOptions {
            tol: 1e-8,
            max_evals: 20_000,
            log_bound: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    pub names: Vec<String>,
    pub beta: DVector<f64>,
    /// Model-based covariance of `beta`.
    pub cov_beta: DMatrix<f64>,
    /// Covariance of (random intercept, random slope).
    pub g: Matrix2<f64>,
    pub sigma2: f64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// A variance component sits on the edge of the parameter space.
    pub boundary: bool,
    pub theta: [f64; 3],
    pub z_columns: [usize; 2],
    /// Predicted random effects per cluster.
    pub blups: BTreeMap<String, Vector2<f64>>,
    pub n_obs: usize,
    pub n_clusters: usize,
}

impl LmmFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.beta[j])
    }
}

struct ClusterBlock {
    label: String,
    rows: Vec<usize>,
    ztz: Matrix2<f64>,
    ztx: Matrix2xX<f64>,
    zty: Vector2<f64>,
}

/// Precomputed profiled-likelihood problem for one dataset.
pub struct LmmProblem<'a> {
    x: &'a DesignMatrix,
    y: &'a [f64],
    z_columns: [usize; 2],
    blocks: Vec<ClusterBlock>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

struct Profile {
    beta: DVector<f64>,
    sigma2: f64,
    deviance: f64,
    xtvx: DMatrix<f64>,
    /// `L (I + L'Z'ZL)^-1 L'` per cluster.
    a: Vec<Matrix2<f64>>,
    /// `Z_c' r_c` per cluster.
    ztr: Vec<Vector2<f64>>,
}

fn factor(theta: &[f64]) -> Matrix2<f64> {
    Matrix2::new(theta[0].exp(), 0.0, theta[1], theta[2].exp())
}

impl<'a> LmmProblem<'a> {
    pub fn new(x: &'a DesignMatrix, y: &'a [f64], z_columns: [usize; 2]) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "design has {} rows but response has {}",
                x.nrows(),
                y.len()
            )));
        }
        if z_columns.iter().any(|&j| j >= x.ncols()) {
            return Err(Error::Dimension("random-effect column out of range".into()));
        }
        let m = x.matrix();
        let p = x.ncols();
        let blocks = x
            .cluster_rows()
            .into_iter()
            .map(|(label, rows)| {
                let mut ztz = Matrix2::zeros();
                let mut ztx = Matrix2xX::zeros(p);
                let mut zty = Vector2::zeros();
                for &i in &rows {
                    let z = Vector2::new(m[(i, z_columns[0])], m[(i, z_columns[1])]);
                    ztz += z * z.transpose();
                    zty += z * y[i];
                    for j in 0..p {
                        ztx[(0, j)] += z[0] * m[(i, j)];
                        ztx[(1, j)] += z[1] * m[(i, j)];
                    }
                }
                ClusterBlock {
                    label,
                    rows,
                    ztz,
                    ztx,
                    zty,
                }
            })
            .collect();
        let xtx = m.transpose() * m;
        let xty = m.transpose() * DVector::from_column_slice(y);
        Ok(LmmProblem {
            x,
            y,
            z_columns,
            blocks,
            xtx,
            xty,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.blocks.len()
    }

    /// Profiled deviance (-2 log-likelihood) at `theta`.
    pub fn deviance(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.profile(theta)?.deviance)
    }

    fn profile(&self, theta: &[f64]) -> Result<Profile> {
        let l = factor(theta);
        let m = self.x.matrix();
        let p = self.x.ncols();
        let mut xtvx = self.xtx.clone();
        let mut xtvy = self.xty.clone();
        let mut a_all = Vec::with_capacity(self.blocks.len());
        let mut logdet = 0.0;
        for b in &self.blocks {
            let mm = Matrix2::identity() + l.transpose() * b.ztz * l;
            let det = mm.determinant();
            let inv = mm.try_inverse().ok_or_else(|| {
                Error::NotPositiveDefinite(format!("cluster {} covariance", b.label))
            })?;
            logdet += det.ln();
            let a = l * inv * l.transpose();
            let aztx = a * &b.ztx;
            xtvx.gemm_tr(-1.0, &b.ztx, &aztx, 1.0);
            xtvy.gemv_tr(-1.0, &b.ztx, &(a * b.zty), 1.0);
            a_all.push(a);
        }
        let chol = xtvx.clone().cholesky().ok_or_else(|| Error::Singular {
            rank: 0,
            ncols: p,
            columns: self.x.names().to_vec(),
        })?;
        let beta = chol.solve(&xtvy);

        let mut quad = 0.0;
        let mut ztr_all = Vec::with_capacity(self.blocks.len());
        for (b, a) in self.blocks.iter().zip(&a_all) {
            let mut rtr = 0.0;
            let mut ztr = Vector2::zeros();
            for &i in &b.rows {
                let mut fitted = 0.0;
                for j in 0..p {
                    fitted += m[(i, j)] * beta[j];
                }
                let r = self.y[i] - fitted;
                rtr += r * r;
                ztr[0] += m[(i, self.z_columns[0])] * r;
                ztr[1] += m[(i, self.z_columns[1])] * r;
            }
            quad += rtr - (ztr.transpose() * a * ztr)[0];
            ztr_all.push(ztr);
        }
        let n = self.y.len() as f64;
        let sigma2 = (quad / n).max(f64::MIN_POSITIVE);
        let deviance = n * (1.0 + LN_2PI + sigma2.ln()) + logdet;
        Ok(Profile {
            beta,
            sigma2,
            deviance,
            xtvx,
            a: a_all,
            ztr: ztr_all,
        })
    }
}

fn project(theta: &[f64], bound: f64) -> [f64; 3] {
    let off = bound.exp();
    [
        theta[0].clamp(-bound, bound),
        theta[1].clamp(-off, off),
        theta[2].clamp(-bound, bound),
    ]
}

/// Fits the two-random-effect linear mixed model by maximum likelihood.
///
/// `z_columns` names the design columns carrying the random effects, usually
/// the intercept and the time regressor.
pub fn lmm_fit(x: &DesignMatrix, y: &[f64], z_columns: [usize; 2], opts: &LmmOptions) -> Result<LmmFit> {
    let problem = LmmProblem::new(x, y, z_columns)?;
    if problem.n_clusters() < 2 {
        return Err(Error::InvalidInput("mixed model needs at least two clusters".into()));
    }
    let start_fit = ols(x, y, None)?;
    let ss: f64 = y.iter().map(|v| v * v).sum();
    let rss: f64 = start_fit.residuals.iter().map(|r| r * r).sum();
    if rss <= 1e-24 * ss.max(1.0) {
        // the fixed effects alone reproduce the data: nothing left for the
        // variance components
        return Ok(LmmFit {
            names: x.names().to_vec(),
            cov_beta: DMatrix::zeros(x.ncols(), x.ncols()),
            beta: start_fit.beta,
            g: Matrix2::zeros(),
            sigma2: 0.0,
            loglik: f64::INFINITY,
            converged: false,
            iterations: 0,
            boundary: true,
            theta: [-opts.log_bound, 0.0, -opts.log_bound],
            z_columns,
            blups: problem.blocks.iter().map(|b| (b.label.clone(), Vector2::zeros())).collect(),
            n_obs: y.len(),
            n_clusters: problem.n_clusters(),
        });
    }

    let bound = opts.log_bound;
    let objective = |t: &[f64]| problem.deviance(&project(t, bound)).unwrap_or(f64::INFINITY);

    let mut best = [0.0, 0.0, 0.0];
    let mut best_f = f64::INFINITY;
    let mut evals = 0;
    for &a in &[-3.0, -1.0, 0.0, 1.0] {
        for &c in &[-3.0, -1.0, 0.0, 1.0] {
            let t = [a, 0.0, c];
            let f = objective(&t);
            evals += 1;
            if f < best_f {
                best_f = f;
                best = t;
            }
        }
    }
    if !best_f.is_finite() {
        // surface the underlying error
        problem.deviance(&best)?;
    }

    let nm = NelderMeadOptions {
        initial_step: 0.5,
        f_tol: 1e-13 * best_f.abs().max(1.0),
        x_tol: 1e-6,
        max_evals: opts.max_evals,
    };
    let mut converged = false;
    let mut step = nm.initial_step;
    while evals < opts.max_evals {
        let run = nelder_mead(
            &objective,
            &best,
            &NelderMeadOptions {
                initial_step: step,
                max_evals: opts.max_evals - evals,
                ..nm
            },
        );
        evals += run.evals;
        let improvement = best_f - run.f;
        if run.f <= best_f {
            best = project(&run.x, bound);
            best_f = run.f;
        }
        if run.converged && improvement < opts.tol {
            converged = true;
            break;
        }
        step = (step * 0.5).max(1e-3);
    }

    let (polished, polish_evals) = newton_polish(&objective, best, best_f, bound);
    evals += polish_evals;
    best = polished;

    let prof = problem.profile(&best)?;
    let l = factor(&best);
    let lambda = l * l.transpose();
    let g = lambda * prof.sigma2;
    let cov_beta = prof
        .xtvx
        .clone()
        .try_inverse()
        .map(|inv| super::ols::symmetrize(inv * prof.sigma2))
        .ok_or_else(|| Error::NotPositiveDefinite("GLS information matrix".into()))?;
    let blups = problem
        .blocks
        .iter()
        .zip(prof.a.iter().zip(&prof.ztr))
        .map(|(b, (a, ztr))| (b.label.clone(), a * ztr))
        .collect();
    let edge = 1e-3;
    let boundary = best[0].abs() >= bound - edge || best[2].abs() >= bound - edge || prof.sigma2 <= 1e-300;

    Ok(LmmFit {
        names: x.names().to_vec(),
        beta: prof.beta,
        cov_beta,
        g: (g + g.transpose()) * 0.5,
        sigma2: prof.sigma2,
        loglik: -0.5 * prof.deviance,
        converged,
        iterations: evals,
        boundary,
        theta: best,
        z_columns,
        blups,
        n_obs: y.len(),
        n_clusters: problem.n_clusters(),
    })
}

/// A few damped Newton steps with finite-difference derivatives, accepted only
/// when they lower the deviance.
fn newton_polish<F: Fn(&[f64]) -> f64>(f: &F, mut x: [f64; 3], mut fx: f64, bound: f64) -> ([f64; 3], usize) {
    let h = 1e-4;
    let mut evals = 0;
    for _ in 0..6 {
        let mut grad = [0.0; 3];
        let mut hess = [[0.0f64; 3]; 3];
        let at = |d: &[(usize, f64)]| {
            let mut t = x;
            for &(i, s) in d {
                t[i] += s;
            }
            t
        };
        for i in 0..3 {
            let fp = f(&at(&[(i, h)]));
            let fm = f(&at(&[(i, -h)]));
            evals += 2;
            grad[i] = (fp - fm) / (2.0 * h);
            hess[i][i] = (fp - 2.0 * fx + fm) / (h * h);
            for j in 0..i {
                let fpp = f(&at(&[(i, h), (j, h)]));
                let fpm = f(&at(&[(i, h), (j, -h)]));
                let fmp = f(&at(&[(i, -h), (j, h)]));
                let fmm = f(&at(&[(i, -h), (j, -h)]));
                evals += 4;
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                hess[i][j] = v;
                hess[j][i] = v;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        let hm = nalgebra::Matrix3::from_fn(|i, j| hess[i][j]);
        let Some(chol) = hm.cholesky() else { break };
        let step = chol.solve(&nalgebra::Vector3::from(grad));
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let cand = project(&[x[0] - scale * step[0], x[1] - scale * step[1], x[2] - scale * step[2]], bound);
            let fc = f(&cand);
            evals += 1;
            if fc < fx {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || step.amax() * scale < 1e-10 {
            break;
        }
    }
    (x, evals)
}

/// Predictions from a mixed-model fit. Without BLUPs this is the population
/// mean `X beta`; with BLUPs each row adds its cluster's predicted random
/// effects, evaluated on the same random-effect columns used in fitting.
pub fn lmm_predict(fit: &LmmFit, x_new: &DesignMatrix, include_blups: bool) -> Result<DVector<f64>> {
    if x_new.names() != fit.names.as_slice() {
        return Err(Error::Dimension(format!(
            "prediction columns {:?} do not match fitted columns {:?}",
            x_new.names(),
            fit.names
        )));
    }
    let mut pred = x_new.matrix() * &fit.beta;
    if include_blups {
        let m = x_new.matrix();
        for (i, c) in x_new.clusters().iter().enumerate() {
            let b = fit
                .blups
                .get(c)
                .ok_or_else(|| Error::InvalidInput(format!("no random effects for unknown cluster '{c}'")))?;
            pred[i] += m[(i, fit.z_columns[0])] * b[0] + m[(i, fit.z_columns[1])] * b[1];
        }
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Balanced clusters on times 0..k with random intercepts/slopes.
    fn simulate(
        seed: u64,
        clusters: usize,
        k: usize,
        g: [f64; 3],
        sigma: f64,
    ) -> (DesignMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for c in 0..clusters {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let b0 = g[0] * z0;
            let b1 = g[1] * z0 + g[2] * z1;
            for t in 0..k {
                let t = t as f64;
                let e: f64 = rng.sample(StandardNormal);
                rows.push(vec![1.0, t]);
                y.push(50.0 + b0 + (-1.0 + b1) * t + sigma * e);
                ids.push(format!("s{c}"));
            }
        }
        (DesignMatrix::from_rows(&["intercept", "time"], &rows, ids).unwrap(), y)
    }

    #[test]
    fn no_random_effects_balanced_equals_ols() {
        let (x, y) = simulate(1, 30, 5, [0.0, 0.0, 0.0], 2.0);
        let fit = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        let o = ols(&x, &y, None).unwrap();
        assert!((&fit.beta - &o.beta).amax() < 1e-6, "{} vs {}", fit.beta, o.beta);
    }

    #[test]
    fn noiseless_lines_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for c in 0..6 {
            let a = rng.random_range(60.0..90.0);
            let b = rng.random_range(-5.0..1.0);
            for t in 0..4 {
                rows.push(vec![1.0, t as f64]);
                y.push(a + b * t as f64);
                ids.push(format!("s{c}"));
            }
        }
        let x = DesignMatrix::from_rows(&["intercept", "time"], &rows, ids).unwrap();
        let fit = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        assert!(fit.boundary);
        let pred = lmm_predict(&fit, &x, true).unwrap();
        for (p, v) in pred.iter().zip(&y) {
            assert!((p - v).abs() < 1e-6, "{p} vs {v}");
        }
    }

    #[test]
    fn constant_response_is_degenerate() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![1.0, (i % 4) as f64]).collect();
        let ids = (0..12).map(|i| format!("s{}", i / 4)).collect();
        let x = DesignMatrix::from_rows(&["intercept", "time"], &rows, ids).unwrap();
        let y = vec![7.0; 12];
        let fit = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        assert!(fit.boundary);
        assert!((fit.beta[0] - 7.0).abs() < 1e-9);
        assert!(fit.beta[1].abs() < 1e-9);
        assert_eq!(fit.sigma2, 0.0);
    }

    #[test]
    fn recovers_variance_components() {
        let (x, y) = simulate(7, 400, 6, [4.0, 0.3, 0.8], 1.5);
        let fit = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.beta[0] - 50.0).abs() < 0.6);
        assert!((fit.beta[1] + 1.0).abs() < 0.15);
        assert!((fit.g[(0, 0)] - 16.0).abs() < 4.0, "{}", fit.g);
        assert!((fit.g[(1, 1)] - 0.73).abs() < 0.25, "{}", fit.g);
        assert!((fit.sigma2.sqrt() - 1.5).abs() < 0.1);
        assert!(super::super::min_eigenvalue(&DMatrix::from_fn(2, 2, |i, j| fit.g[(i, j)])) >= -1e-8);
    }

    #[test]
    fn gradient_small_and_local_maximum() {
        let (x, y) = simulate(21, 40, 5, [3.0, 0.5, 1.0], 2.0);
        let fit = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        assert!(fit.converged && !fit.boundary);
        let problem = LmmProblem::new(&x, &y, [0, 1]).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut tp = fit.theta;
            let mut tm = fit.theta;
            tp[i] += h;
            tm[i] -= h;
            let g = (problem.deviance(&tp).unwrap() - problem.deviance(&tm).unwrap()) / (2.0 * h);
            assert!(g.abs() < 1e-3, "gradient component {i}: {g}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..32 {
            let t: Vec<f64> = fit.theta.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
            let ll = -0.5 * problem.deviance(&t).unwrap();
            assert!(fit.loglik >= ll - 1e-9);
        }
    }

    #[test]
    fn blups_shrink_subject_fits() {
        // Each subject's own OLS deviation from the population line, gamma,
        // and its BLUP b satisfy ||b||_S <= ||gamma||_S with S = Z'Z.
        let (x, y) = simulate(5, 25, 4, [3.0, 0.2, 0.7], 2.5);
        let fit = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        assert!(fit.sigma2 > 0.0);
        let mut inside = 0;
        let rows_by = x.cluster_rows();
        for (label, rows) in &rows_by {
            let ts: Vec<f64> = rows.iter().map(|&i| x.matrix()[(i, 1)]).collect();
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let tm = ts.iter().sum::<f64>() / ts.len() as f64;
            let ym = ys.iter().sum::<f64>() / ys.len() as f64;
            let slope = ts.iter().zip(&ys).map(|(t, v)| (t - tm) * (v - ym)).sum::<f64>()
                / ts.iter().map(|t| (t - tm).powi(2)).sum::<f64>();
            let icpt = ym - slope * tm;
            let gamma = Vector2::new(icpt - fit.beta[0], slope - fit.beta[1]);
            let s = ts.iter().fold(Matrix2::zeros(), |acc: Matrix2<f64>, t| {
                acc + Vector2::new(1.0, *t) * Vector2::new(1.0, *t).transpose()
            });
            let b = fit.blups[label];
            let nb = (b.transpose() * s * b)[0];
            let ng = (gamma.transpose() * s * gamma)[0];
            assert!(nb <= ng + 1e-9, "{label}: {nb} > {ng}");
            let (lo, hi) = if slope < fit.beta[1] { (slope, fit.beta[1]) } else { (fit.beta[1], slope) };
            let pred = fit.beta[1] + b[1];
            if pred >= lo - 1e-9 && pred <= hi + 1e-9 {
                inside += 1;
            }
        }
        // componentwise betweenness is typical but not guaranteed once the
        // random effects are correlated
        assert!(inside * 4 >= rows_by.len() * 3, "{inside} of {}", rows_by.len());
    }

    #[test]
    fn predict_population_and_unknown_cluster() {
        let (x, y) = simulate(2, 10, 4, [2.0, 0.1, 0.5], 1.0);
        let mut fit = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        fit.beta = DVector::from_vec(vec![1.0, 2.0]);
        let xn = DesignMatrix::from_rows(&["intercept", "time"], &[vec![1.0, 3.0]], vec!["nobody".into()]).unwrap();
        assert_eq!(lmm_predict(&fit, &xn, false).unwrap()[0], 7.0);
        assert!(lmm_predict(&fit, &xn, true).is_err());
    }

    #[test]
    fn deterministic() {
        let (x, y) = simulate(8, 20, 5, [2.0, 0.3, 0.5], 1.0);
        let a = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        let b = lmm_fit(&x, &y, [0, 1], &Default::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn needs_two_clusters() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, i as f64]).collect();
        let x = DesignMatrix::from_rows(&["intercept", "time"], &rows, vec!["a".into(); 4]).unwrap();
        assert!(lmm_fit(&x, &[1.0, 2.0, 2.5, 4.0], [0, 1], &Default::default()).is_err());
    }
}
