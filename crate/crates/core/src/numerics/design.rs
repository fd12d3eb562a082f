use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Regression design: named columns, one row per observation, and the
/// cluster (subject) each row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    data: DMatrix<f64>,
    clusters: Vec<String>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, data: DMatrix<f64>, clusters: Vec<String>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::Dimension("design needs at least one column".into()));
        }
        if names.len() != data.ncols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} columns",
                names.len(),
                data.ncols()
            )));
        }
        if clusters.len() != data.nrows() {
            return Err(Error::Dimension(format!(
                "{} cluster ids for {} rows",
                clusters.len(),
                data.nrows()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (k % data.nrows(), k / data.nrows());
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {r}, column '{}'",
                names[c]
            )));
        }
        Ok(DesignMatrix { names, data, clusters })
    }

    /// Builds a design from row vectors.
    pub fn from_rows<S: AsRef<str>>(names: &[S], rows: &[Vec<f64>], clusters: Vec<String>) -> Result<Self> {
        let p = names.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(Error::Dimension(format!("row {bad} has {} entries, expected {p}", rows[bad].len())));
        }
        let data = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(names.iter().map(|s| s.as_ref().to_string()).collect(), data, clusters)
    }

    /// Design where every row is its own cluster.
    pub fn unclustered<S: AsRef<str>>(names: &[S], data: DMatrix<f64>) -> Result<Self> {
        let clusters = (0..data.nrows()).map(|i| i.to_string()).collect();
        Self::new(names.iter().map(|s| s.as_ref().to_string()).collect(), data, clusters)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn clusters(&self) -> &[String] {
        &self.clusters
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Row indices per cluster, clusters in order of first appearance.
    pub fn cluster_rows(&self) -> Vec<(String, Vec<usize>)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, c) in self.clusters.iter().enumerate() {
            let k = *index.entry(c.as_str()).or_insert_with(|| {
                out.push((c.clone(), Vec::new()));
                out.len() - 1
            });
            out[k].1.push(i);
        }
        out
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_rows().len()
    }

    pub fn times(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.data * beta
    }

    /// Columns that are (numerically) linear combinations of earlier ones,
    /// found by modified Gram-Schmidt with one reorthogonalization pass.
    pub(crate) fn aliased_columns(&self, weights: Option<&[f64]>) -> Vec<usize> {
        let n = self.nrows();
        let scale: Vec<f64> = match weights {
            Some(w) => w.iter().map(|v| v.sqrt()).collect(),
            None => vec![1.0; n],
        };
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut aliased = Vec::new();
        for j in 0..self.ncols() {
            let mut v = DVector::from_fn(n, |i, _| self.data[(i, j)] * scale[i]);
            let norm0 = v.norm();
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&v);
                    v.axpy(-c, q, 1.0);
                }
            }
            let norm = v.norm();
            if norm0 == 0.0 || norm <= 1e-10 * norm0 {
                aliased.push(j);
            } else {
                basis.push(v / norm);
            }
        }
        aliased
    }

    pub(crate) fn check_rank(&self, weights: Option<&[f64]>) -> Result<()> {
        let aliased = self.aliased_columns(weights);
        if aliased.is_empty() {
            Ok(())
        } else {
            Err(Error::Singular {
                rank: self.ncols() - aliased.len(),
                ncols: self.ncols(),
                columns: aliased.iter().map(|&j| self.names[j].clone()).collect(),
            })
        }
    }
}
