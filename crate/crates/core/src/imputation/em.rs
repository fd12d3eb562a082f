use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once the observed-data log-likelihood gains less than this.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_iter: 500, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvnModel {
    /// Column labels, e.g. visit times.
    pub columns: Vec<String>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Observed-data log-likelihood after each iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// A small ridge was added to keep the covariance positive definite.
    pub ridge_applied: bool,
}

impl MvnModel {
    pub fn iterations(&self) -> usize {
        self.loglik_trace.len()
    }

    /// Mean and covariance of the missing entries given the observed ones.
    pub fn conditional(&self, row: &[Option<f64>]) -> Result<(Vec<usize>, DVector<f64>, DMatrix<f64>)> {
        conditional(&self.mean, &self.covariance, row)
    }
}

fn split(row: &[Option<f64>]) -> (Vec<usize>, Vec<usize>) {
    let obs = (0..row.len()).filter(|&j| row[j].is_some()).collect();
    let mis = (0..row.len()).filter(|&j| row[j].is_none()).collect();
    (obs, mis)
}

fn sub(m: &DMatrix<f64>, r: &[usize], c: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(r.len(), c.len(), |i, j| m[(r[i], c[j])])
}

pub(crate) fn conditional(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    row: &[Option<f64>],
) -> Result<(Vec<usize>, DVector<f64>, DMatrix<f64>)> {
    let (o, m) = split(row);
    let mu_m = DVector::from_iterator(m.len(), m.iter().map(|&j| mean[j]));
    let s_mm = sub(cov, &m, &m);
    if o.is_empty() || m.is_empty() {
        return Ok((m, mu_m, s_mm));
    }
    let s_oo = sub(cov, &o, &o);
    let s_mo = sub(cov, &m, &o);
    let dev = DVector::from_iterator(o.len(), o.iter().map(|&j| row[j].expect("observed") - mean[j]));
    let chol = s_oo
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("observed-block covariance".into()))?;
    let cm = &mu_m + &s_mo * chol.solve(&dev);
    let cc = &s_mm - &s_mo * chol.solve(&s_mo.transpose());
    Ok((m, cm, (&cc + cc.transpose()) * 0.5))
}

/// Observed-data log-likelihood.
pub fn mvn_loglik(data: &[Vec<Option<f64>>], mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = 0.0;
    for row in data {
        let (o, _) = split(row);
        if o.is_empty() {
            continue;
        }
        let s = sub(cov, &o, &o);
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("observed-block covariance".into()))?;
        let dev = DVector::from_iterator(o.len(), o.iter().map(|&j| row[j].expect("observed") - mean[j]));
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(o.len()).map(|d| d.ln()).sum::<f64>();
        ll -= 0.5 * (o.len() as f64 * ln2pi + logdet + dev.dot(&chol.solve(&dev)));
    }
    Ok(ll)
}

/// Adds a ridge when `cov` is not positive definite. Returns whether it did.
fn regularize(cov: &mut DMatrix<f64>) -> bool {
    if cov.clone().cholesky().is_some() {
        return false;
    }
    let p = cov.nrows();
    let scale = (cov.trace() / p as f64).abs().max(1.0);
    let mut ridge = 1e-8 * scale;
    loop {
        for i in 0..p {
            cov[(i, i)] += ridge;
        }
        if cov.clone().cholesky().is_some() {
            return true;
        }
        ridge *= 10.0;
    }
}

/// EM fit of a multivariate normal to rows with missing entries.
///
/// Every column needs two observed entries. Rows with nothing observed add
/// nothing to the likelihood.
pub fn em_mvn(data: &[Vec<Option<f64>>], opts: &EmOptions) -> Result<MvnModel> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("no rows to fit".into()));
    }
    let p = data[0].len();
    if p == 0 || data.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension("rows must share a positive column count".into()));
    }
    for (i, r) in data.iter().enumerate() {
        if r.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("row {i} has a non-finite entry")));
        }
    }
    let mut mean = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for j in 0..p {
        let col: Vec<f64> = data.iter().filter_map(|r| r[j]).collect();
        if col.len() < 2 {
            return Err(Error::InvalidInput(format!("column {j} has fewer than two observed entries")));
        }
        let m = col.iter().sum::<f64>() / col.len() as f64;
        mean[j] = m;
        cov[(j, j)] = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
    }
    let complete = data.iter().all(|r| r.iter().all(Option::is_some));
    let mut ridge_applied = regularize(&mut cov);
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iter.max(1) {
        // E-step: expected sufficient statistics
        let mut filled: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut extra = DMatrix::<f64>::zeros(p, p);
        for row in data {
            let (m, cm, cc) = conditional(&mean, &cov, row)?;
            let mut x = DVector::from_iterator(p, row.iter().map(|v| v.unwrap_or(0.0)));
            for (a, &j) in m.iter().enumerate() {
                x[j] = cm[a];
                for (b, &k) in m.iter().enumerate() {
                    extra[(j, k)] += cc[(a, b)];
                }
            }
            filled.push(x);
        }
        // M-step
        let new_mean = filled.iter().fold(DVector::zeros(p), |acc, x| acc + x) / n as f64;
        let mut new_cov = extra;
        for x in &filled {
            let d = x - &new_mean;
            new_cov += &d * d.transpose();
        }
        new_cov /= n as f64;
        new_cov = (&new_cov + new_cov.transpose()) * 0.5;
        ridge_applied |= regularize(&mut new_cov);
        mean = new_mean;
        cov = new_cov;

        let ll = mvn_loglik(data, &mean, &cov)?;
        let gain = trace.last().map(|prev| ll - prev);
        trace.push(ll);
        if complete || gain.is_some_and(|g| g.abs() < opts.tol) {
            converged = true;
            break;
        }
    }

    Ok(MvnModel {
        columns: (0..p).map(|j| j.to_string()).collect(),
        mean,
        covariance: cov,
        loglik_trace: trace,
        converged,
        ridge_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{asymmetry, min_eigenvalue};
    use proptest::prelude::*;

    #[test]
    fn complete_data_is_ml_in_one_step() {
        let data = vec![
            vec![Some(1.0), Some(2.0)],
            vec![Some(2.0), Some(1.0)],
            vec![Some(4.0), Some(5.0)],
            vec![Some(3.0), Some(4.0)],
        ];
        let m = em_mvn(&data, &Default::default()).unwrap();
        assert_eq!(m.iterations(), 1);
        assert!((m.mean[0] - 2.5).abs() < 1e-14 && (m.mean[1] - 3.0).abs() < 1e-14);
        // denominator n
        assert!((m.covariance[(0, 0)] - 1.25).abs() < 1e-12);
        assert!((m.covariance[(1, 1)] - 2.5).abs() < 1e-12);
        assert!((m.covariance[(0, 1)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn univariate_mean_of_observed() {
        let data = vec![vec![Some(1.0)], vec![None], vec![Some(5.0)], vec![Some(3.0)]];
        let m = em_mvn(&data, &EmOptions { max_iter: 1000, tol: 1e-14 }).unwrap();
        assert!((m.mean[0] - 3.0).abs() < 1e-9);
        assert!((m.covariance[(0, 0)] - 8.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn sparse_column_rejected() {
        let data = vec![vec![Some(1.0), None], vec![Some(2.0), Some(1.0)], vec![Some(3.0), None]];
        assert!(em_mvn(&data, &Default::default()).is_err());
    }

    fn bivariate() -> Vec<Vec<Option<f64>>> {
        vec![
            vec![Some(1.0), Some(2.1)],
            vec![Some(2.0), Some(2.9)],
            vec![Some(3.0), Some(4.2)],
            vec![Some(4.0), Some(4.8)],
            vec![Some(2.5), None],
        ]
    }

    /// Direct maximization over (mu1, mu2, log s1, log s2, atanh r) by a
    /// shrinking compass search on the observed-data likelihood.
    fn likelihood_search(data: &[Vec<Option<f64>>]) -> f64 {
        let f = |p: &[f64; 5]| {
            let (s1, s2, r) = (p[2].exp(), p[3].exp(), p[4].tanh());
            let mean = DVector::from_vec(vec![p[0], p[1]]);
            let cov = DMatrix::from_row_slice(2, 2, &[s1 * s1, r * s1 * s2, r * s1 * s2, s2 * s2]);
            mvn_loglik(data, &mean, &cov).unwrap_or(f64::NEG_INFINITY)
        };
        let mut x = [2.0, 3.0, 0.0, 0.0, 0.0];
        let mut best = f(&x);
        let mut step = 1.0;
        while step > 1e-9 {
            let mut improved = false;
            for k in 0..5 {
                for s in [step, -step] {
                    let mut y = x;
                    y[k] += s;
                    let v = f(&y);
                    if v > best {
                        best = v;
                        x = y;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best
    }

    #[test]
    fn bivariate_matches_likelihood_search() {
        let data = bivariate();
        let m = em_mvn(&data, &EmOptions { max_iter: 10_000, tol: 1e-13 }).unwrap();
        let oracle = likelihood_search(&data);
        let got = *m.loglik_trace.last().unwrap();
        assert!((got - oracle).abs() < 1e-3, "{got} vs {oracle}");
        assert!(got >= oracle - 1e-6);
    }

    #[test]
    fn closed_form_conditional_mean() {
        let mean = DVector::from_vec(vec![10.0, 20.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 9.0]);
        let (m, cm, cc) = conditional(&mean, &cov, &[None, Some(26.0)]).unwrap();
        assert_eq!(m, vec![0]);
        assert!((cm[0] - (10.0 + 3.0 / 9.0 * 6.0)).abs() < 1e-12);
        assert!((cc[(0, 0)] - (4.0 - 9.0 / 9.0)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn trace_monotone_and_covariance_psd(
            cells in proptest::collection::vec(proptest::collection::vec((-20.0f64..20.0, 0u8..4), 3), 8..20)
        ) {
            // roughly a quarter of the entries are missing; the first five rows
            // are complete so the likelihood is bounded
            let data: Vec<Vec<Option<f64>>> = cells
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().map(|(v, k)| if *k == 0 && i >= 5 { None } else { Some(*v) }).collect())
                .collect();
            let m = em_mvn(&data, &EmOptions { max_iter: 200, tol: 1e-12 }).unwrap();
            for w in m.loglik_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10, "{:?}", m.loglik_trace);
            }
            prop_assert!(asymmetry(&m.covariance) == 0.0);
            prop_assert!(min_eigenvalue(&m.covariance) >= -1e-8);
        }
    }
}
