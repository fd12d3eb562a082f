use std::collections::BTreeSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cohort::{years_from_death_view, Cohort, Subject};
use crate::numerics::{DesignMatrix, LmmOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regressor {
    Intercept,
    Group,
    BaselineAge,
    Time,
    Time2,
    GroupTime,
    GroupTime2,
}

impl Regressor {
    pub fn name(&self) -> &'static str {
        match self {
            Regressor::Intercept => "intercept",
            Regressor::Group => "group",
            Regressor::BaselineAge => "baseline_age",
            Regressor::Time => "time",
            Regressor::Time2 => "time2",
            Regressor::GroupTime => "group_time",
            Regressor::GroupTime2 => "group_time2",
        }
    }

    pub fn value(&self, group: f64, age: f64, t: f64) -> f64 {
        match self {
            Regressor::Intercept => 1.0,
            Regressor::Group => group,
            Regressor::BaselineAge => age,
            Regressor::Time => t,
            Regressor::Time2 => t * t,
            Regressor::GroupTime => group * t,
            Regressor::GroupTime2 => group * t * t,
        }
    }

    fn involves_group(&self) -> bool {
        matches!(self, Regressor::Group | Regressor::GroupTime | Regressor::GroupTime2)
    }

    fn is_quadratic(&self) -> bool {
        matches!(self, Regressor::Time2 | Regressor::GroupTime2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    None,
    InterceptSlope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScale {
    /// Years since baseline.
    FromBaseline,
    /// Years relative to death (negative), decedents only.
    FromDeath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fixed: Vec<Regressor>,
    pub random_effects: RandomEffects,
    pub time_scale: TimeScale,
}

impl ModelSpec {
    /// Group, baseline age, quadratic time and group-by-time interactions.
    pub fn quadratic(random_effects: RandomEffects, time_scale: TimeScale) -> Self {
        use Regressor::*;
        ModelSpec {
            fixed: vec![Intercept, Group, BaselineAge, Time, Time2, GroupTime, GroupTime2],
            random_effects,
            time_scale,
        }
    }

    /// Intercept and linear time only.
    pub fn linear_time(random_effects: RandomEffects, time_scale: TimeScale) -> Self {
        ModelSpec {
            fixed: vec![Regressor::Intercept, Regressor::Time],
            random_effects,
            time_scale,
        }
    }

    pub fn has(&self, r: Regressor) -> bool {
        self.fixed.contains(&r)
    }

    pub(crate) fn require_scale(&self, scale: TimeScale, what: &str) -> Result<()> {
        if self.time_scale != scale {
            return Err(Error::InvalidInput(format!("{what} requires time scale {scale:?}")));
        }
        Ok(())
    }
}

/// Settings shared by the regression engines.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Times at which fitted means are reported.
    pub horizons: Vec<f64>,
    /// Baseline age used for fitted trajectories.
    pub reference_age: f64,
    /// Tolerance for matching an observation to a nominal time.
    pub matching_window: f64,
    /// Years before death (positive) at which terminal-decline fits are reported.
    pub years_before_death: Vec<f64>,
    pub lmm: LmmOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            horizons: vec![5.0],
            reference_age: 70.0,
            matching_window: 0.0,
            years_before_death: vec![1.0, 2.0, 6.0],
            lmm: LmmOptions::default(),
        }
    }
}

/// One observed response row on the chosen time scale.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Row<'a> {
    pub subject: &'a Subject,
    pub time: f64,
    pub y: f64,
}

/// Observed (non-missing) rows on the requested time scale, in storage order.
pub(crate) fn observed_rows(cohort: &Cohort, scale: TimeScale) -> Vec<Row<'_>> {
    match scale {
        TimeScale::FromBaseline => cohort
            .trajectories()
            .into_iter()
            .flat_map(|tr| {
                let s = tr.subject;
                tr.observations
                    .into_iter()
                    .filter_map(move |o| o.value.map(|y| Row { subject: s, time: o.time, y }))
            })
            .collect(),
        TimeScale::FromDeath => years_from_death_view(cohort)
            .into_iter()
            .filter_map(|o| {
                let subject = cohort.subject(o.subject_id.as_str())?;
                o.value.map(|y| Row { subject, time: o.time, y })
            })
            .collect(),
    }
}

/// A design matrix built from a spec, with regressors that the data cannot
/// identify dropped.
#[derive(Debug, Clone)]
pub(crate) struct BuiltDesign {
    pub regressors: Vec<Regressor>,
    pub x: DesignMatrix,
    pub y: Vec<f64>,
    pub notes: Vec<String>,
}

impl BuiltDesign {
    pub fn index(&self, r: Regressor) -> Option<usize> {
        self.regressors.iter().position(|q| *q == r)
    }

    pub fn prediction_row(&self, group: u8, age: f64, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.regressors.len(),
            self.regressors.iter().map(|r| r.value(group as f64, age, t)),
        )
    }

    pub fn groups(&self, rows: &[Row<'_>]) -> Vec<u8> {
        let g: BTreeSet<u8> = rows.iter().map(|r| r.subject.group).collect();
        g.into_iter().collect()
    }
}

/// Builds the design for `spec` over `rows`. Group terms are dropped when
/// group is constant, baseline age when it is constant, and quadratic terms
/// when fewer than three distinct times are present; each drop is noted.
pub(crate) fn build_design(spec: &ModelSpec, rows: &[Row<'_>]) -> Result<BuiltDesign> {
    if rows.is_empty() {
        return Err(Error::Empty("no observed responses to fit".into()));
    }
    if spec.fixed.is_empty() {
        return Err(Error::InvalidInput("model has no fixed regressors".into()));
    }
    let groups: BTreeSet<u8> = rows.iter().map(|r| r.subject.group).collect();
    let age0 = rows[0].subject.baseline_age;
    let age_constant = rows.iter().all(|r| r.subject.baseline_age == age0);
    let times: BTreeSet<u64> = rows.iter().map(|r| r.time.to_bits()).collect();

    let mut notes = Vec::new();
    let mut regressors = Vec::new();
    for &r in &spec.fixed {
        if r.involves_group() && groups.len() < 2 {
            notes.push(format!("dropped '{}': group is constant", r.name()));
        } else if r == Regressor::BaselineAge && age_constant {
            notes.push(format!("dropped '{}': baseline age is constant", r.name()));
        } else if r.is_quadratic() && times.len() < 3 {
            notes.push(format!("dropped '{}': fewer than three distinct times", r.name()));
        } else if !regressors.contains(&r) {
            regressors.push(r);
        }
    }
    if regressors.is_empty() {
        return Err(Error::InvalidInput("every regressor was dropped".into()));
    }
    let names: Vec<&str> = regressors.iter().map(|r| r.name()).collect();
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            regressors
                .iter()
                .map(|r| r.value(row.subject.group as f64, row.subject.baseline_age, row.time))
                .collect()
        })
        .collect();
    let clusters = rows.iter().map(|r| r.subject.id.to_string()).collect();
    let x = DesignMatrix::from_rows(&names, &data, clusters)?;
    Ok(BuiltDesign {
        regressors,
        x,
        y: rows.iter().map(|r| r.y).collect(),
        notes,
    })
}

/// Per-subject least-squares slope of (time, value) pairs, `None` with fewer
/// than two distinct times.
pub(crate) fn individual_slope(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mt, slope))
}

/// Integer grid `0..=ceil(max)` (or `floor(min)..=0` for negative spans).
pub(crate) fn time_grid(lo: f64, hi: f64) -> Vec<f64> {
    let a = lo.floor() as i64;
    let b = hi.ceil() as i64;
    (a..=b).map(|t| t as f64).collect()
}

/// `sqrt(x' C x)`.
pub(crate) fn quad_se(x: &DVector<f64>, cov: &nalgebra::DMatrix<f64>) -> f64 {
    (x.transpose() * cov * x)[(0, 0)].max(0.0).sqrt()
}

/// Short text form for times in estimate names: `5`, `2.5`, `-2`.
pub(crate) fn tlabel(t: f64) -> String {
    crate::io::fmt_f64(t)
}
