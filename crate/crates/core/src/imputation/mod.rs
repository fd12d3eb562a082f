//! Single imputation of intermittent nonresponse.
//!
//! Subjects are grouped into cells by death stratum and group. Within each
//! cell a multivariate normal over the cell's visit times (plus baseline age
//! when it varies) is fitted by EM, and each missing value is replaced by its
//! conditional mean, optionally with a conditional normal draw added. Values
//! after death are never created: only existing observation rows with a
//! missing value are filled.

mod em;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::cohort::{assign_strata, strata_for, Cohort};
use crate::io::fmt_f64;
use crate::Result;

pub use em::{em_mvn, mvn_loglik, EmOptions, MvnModel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellReport {
    pub label: String,
    pub stratum: String,
    pub group: u8,
    pub n_subjects: usize,
    pub n_missing: usize,
    pub n_imputed: usize,
    pub n_clamped: usize,
    /// Why the cell (or part of it) was left unimputed.
    pub skipped: Option<String>,
    pub em_iterations: usize,
    pub ridge_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImputationReport {
    pub seed: u64,
    pub noise: bool,
    pub cells: Vec<CellReport>,
    pub total_missing: usize,
    pub total_imputed: usize,
    pub total_clamped: usize,
}

/// 64-bit FNV-1a, used to derive stable per-cell seeds.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fills missing values cell by cell. Observed values are copied unchanged.
pub fn impute_single(cohort: &Cohort, boundaries: &[f64], noise: bool, seed: u64) -> Result<(Cohort, ImputationReport)> {
    impute_single_with(cohort, boundaries, noise, seed, &EmOptions::default())
}

pub fn impute_single_with(
    cohort: &Cohort,
    boundaries: &[f64],
    noise: bool,
    seed: u64,
    em_opts: &EmOptions,
) -> Result<(Cohort, ImputationReport)> {
    let assignment = assign_strata(cohort, boundaries)?;
    let strata = strata_for(boundaries)?;
    let mut out = cohort.clone();

    // observation indices per subject, in storage order
    let mut rows_of: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, o) in cohort.observations.iter().enumerate() {
        rows_of.entry(o.subject_id.as_str()).or_default().push(k);
    }

    let mut cells = Vec::new();
    for stratum in &strata {
        for group in 0..=1u8 {
            let members: Vec<_> = cohort
                .subjects
                .iter()
                .filter(|s| s.group == group && assignment.get(&s.id) == Some(stratum))
                .collect();
            if members.is_empty() {
                continue;
            }
            let label = format!("{} / group {group}", stratum.label());
            let mut report = CellReport {
                label: label.clone(),
                stratum: stratum.label(),
                group,
                n_subjects: members.len(),
                n_missing: 0,
                n_imputed: 0,
                n_clamped: 0,
                skipped: None,
                em_iterations: 0,
                ridge_applied: false,
            };
            let obs_idx: Vec<Vec<usize>> = members
                .iter()
                .map(|s| rows_of.get(s.id.as_str()).cloned().unwrap_or_default())
                .collect();
            report.n_missing = obs_idx.iter().flatten().filter(|&&k| cohort.observations[k].is_missing()).count();
            if report.n_missing == 0 {
                cells.push(report);
                continue;
            }

            // columns: visit times with at least two observed values, then age
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            let mut all_times: BTreeSet<u64> = BTreeSet::new();
            for &k in obs_idx.iter().flatten() {
                let o = &cohort.observations[k];
                all_times.insert(o.time.to_bits());
                if o.value.is_some() {
                    *counts.entry(o.time.to_bits()).or_default() += 1;
                }
            }
            let mut times: Vec<f64> = all_times
                .iter()
                .filter(|b| counts.get(b).copied().unwrap_or(0) >= 2)
                .map(|b| f64::from_bits(*b))
                .collect();
            times.sort_by(f64::total_cmp);
            let dropped = all_times.len() - times.len();
            let age0 = members[0].baseline_age;
            let with_age = members.iter().any(|s| s.baseline_age != age0);
            let p = times.len() + usize::from(with_age);
            if times.is_empty() || members.len() < 2 {
                report.skipped = Some(if members.len() < 2 {
                    "fewer than two subjects in cell".into()
                } else {
                    "no visit time with two observed values".into()
                });
                cells.push(report);
                continue;
            }
            let col_of = |t: f64| times.iter().position(|x| *x == t);

            let data: Vec<Vec<Option<f64>>> = members
                .iter()
                .zip(&obs_idx)
                .map(|(s, idx)| {
                    let mut row = vec![None; p];
                    for &k in idx {
                        let o = &cohort.observations[k];
                        if let Some(j) = col_of(o.time) {
                            row[j] = o.value;
                        }
                    }
                    if with_age {
                        row[p - 1] = Some(s.baseline_age);
                    }
                    row
                })
                .collect();

            let model = match em_mvn(&data, em_opts) {
                Ok(mut m) => {
                    m.columns = times.iter().map(|t| format!("t={}", fmt_f64(*t))).collect();
                    if with_age {
                        m.columns.push("baseline_age".into());
                    }
                    m
                }
                Err(e) => {
                    report.skipped = Some(format!("model fit failed: {e}"));
                    cells.push(report);
                    continue;
                }
            };
            report.em_iterations = model.iterations();
            report.ridge_applied = model.ridge_applied;

            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&label));
            let mut unreachable = 0usize;
            for (row, idx) in data.iter().zip(&obs_idx) {
                let (missing_cols, cmean, ccov) = match model.conditional(row) {
                    Ok(c) => c,
                    Err(_) => continue,
                };
                let draws = if noise && !missing_cols.is_empty() {
                    let mut c = ccov.clone();
                    for i in 0..c.nrows() {
                        c[(i, i)] = c[(i, i)].max(0.0) + 1e-12;
                    }
                    let l = c.cholesky().map(|ch| ch.l()).unwrap_or_else(|| {
                        nalgebra::DMatrix::from_diagonal(&ccov.diagonal().map(|v| v.max(0.0).sqrt()))
                    });
                    let z = nalgebra::DVector::from_iterator(
                        missing_cols.len(),
                        (0..missing_cols.len()).map(|_| StandardNormal.sample(&mut rng)),
                    );
                    Some(l * z)
                } else {
                    None
                };
                for &k in idx {
                    let o = &cohort.observations[k];
                    if o.value.is_some() {
                        continue;
                    }
                    let Some(j) = col_of(o.time) else {
                        unreachable += 1;
                        continue;
                    };
                    let a = missing_cols.iter().position(|c| *c == j).expect("missing column");
                    let mut v = cmean[a] + draws.as_ref().map_or(0.0, |d| d[a]);
                    if let Some(b) = cohort.response_bounds {
                        let c = b.clamp(v);
                        if c != v {
                            report.n_clamped += 1;
                            v = c;
                        }
                    }
                    out.observations[k].value = Some(v);
                    report.n_imputed += 1;
                }
            }
            if dropped > 0 || unreachable > 0 {
                report.skipped = Some(format!(
                    "{unreachable} missing value(s) at {dropped} visit time(s) with fewer than two observed values left unimputed"
                ));
            }
            cells.push(report);
        }
    }

    let report = ImputationReport {
        seed,
        noise,
        total_missing: cells.iter().map(|c| c.n_missing).sum(),
        total_imputed: cells.iter().map(|c| c.n_imputed).sum(),
        total_clamped: cells.iter().map(|c| c.n_clamped).sum(),
        cells,
    };
    Ok((out, report))
}
