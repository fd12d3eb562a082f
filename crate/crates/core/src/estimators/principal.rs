//! Survivor-stratum contrast between the two groups under explainable
//! nonrandom survival: each arm's survivors are reweighted by their modelled
//! probability of surviving had they been in the other arm.

use nalgebra::DMatrix;

use super::report::{EstimandReport, ModelKind, Sink, Unit, Variant};
use super::spec::tlabel;
use crate::cohort::{Cohort, Subject, Trajectory};
use crate::numerics::{logistic_fit, DesignMatrix, LogisticFit, LogisticOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalOptions {
    pub horizon: f64,
    /// Subject covariates (by name) the survival model conditions on.
    pub confounders: Vec<String>,
    pub response_time: f64,
    pub matching_window: f64,
    pub logistic: LogisticOptions,
}

impl Default for PrincipalOptions {
    fn default() -> Self {
        PrincipalOptions {
            horizon: 5.0,
            confounders: vec!["baseline_age".into()],
            response_time: 5.0,
            matching_window: 0.0,
            logistic: LogisticOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VitalStatus {
    DeadBy,
    AliveAfter,
    Unknown,
}

/// Status at `horizon`: dead if death is observed at or before it; alive if
/// death is observed later, or if the subject has a visit at or after it.
pub fn vital_status(t: &Trajectory<'_>, horizon: f64) -> VitalStatus {
    match t.subject.observed_death_time() {
        Some(s) if s <= horizon => VitalStatus::DeadBy,
        Some(_) => VitalStatus::AliveAfter,
        None if t.observations.iter().any(|o| o.time >= horizon) => VitalStatus::AliveAfter,
        None => VitalStatus::Unknown,
    }
}

/// Probability of surviving past the horizon, as a function of confounders.
#[derive(Debug, Clone, PartialEq)]
pub enum SurvivalModel {
    Logistic {
        fit: LogisticFit,
        /// Confounder columns used (those varying within the arm).
        columns: Vec<String>,
    },
    /// Every subject in the arm shares the same outcome.
    Constant(f64),
}

impl SurvivalModel {
    pub fn probability(&self, subject: &Subject) -> Result<f64> {
        match self {
            SurvivalModel::Constant(p) => Ok(*p),
            SurvivalModel::Logistic { fit, columns } => {
                let mut row = Vec::with_capacity(columns.len() + 1);
                row.push(1.0);
                for c in columns {
                    row.push(covariate(subject, c)?);
                }
                Ok(fit.probability(&row))
            }
        }
    }
}

fn covariate(s: &Subject, name: &str) -> Result<f64> {
    s.covariate(name)
        .ok_or_else(|| Error::InvalidInput(format!("subject {} has no covariate '{name}'", s.id)))
}

/// Eligible survivors of one arm with their responses and weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArmSample {
    pub ids: Vec<String>,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Everything the estimate is computed from, exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalComponents {
    pub survival_models: [SurvivalModel; 2],
    pub arms: [ArmSample; 2],
    /// Subjects with known vital status per arm.
    pub n_known: [usize; 2],
    pub n_survivors: [usize; 2],
    pub n_indeterminate: usize,
    pub notes: Vec<String>,
}

fn fit_survival(subjects: &[&Subject], alive: &[f64], confounders: &[String], opts: &LogisticOptions, notes: &mut Vec<String>, arm: u8) -> Result<SurvivalModel> {
    if subjects.is_empty() {
        return Err(Error::Empty(format!("group {arm} has no subjects with known vital status")));
    }
    let share = alive.iter().sum::<f64>() / alive.len() as f64;
    if share == 0.0 || share == 1.0 {
        notes.push(format!("group {arm}: every subject has the same vital status; survival probability {share}"));
        return Ok(SurvivalModel::Constant(share));
    }
    let mut columns = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for c in confounders {
        let v: Vec<f64> = subjects.iter().map(|s| covariate(s, c)).collect::<Result<_>>()?;
        if v.iter().all(|x| *x == v[0]) {
            notes.push(format!("group {arm}: confounder '{c}' is constant and was dropped"));
            continue;
        }
        columns.push(c.clone());
        values.push(v);
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(columns.iter().cloned());
    let data = DMatrix::from_fn(subjects.len(), names.len(), |i, j| if j == 0 { 1.0 } else { values[j - 1][i] });
    let x = DesignMatrix::new(names, data, subjects.iter().map(|s| s.id.to_string()).collect())?;
    let fit = logistic_fit(&x, alive, opts)?;
    if !fit.converged {
        notes.push(format!("group {arm}: survival model did not meet its convergence tolerance"));
    }
    Ok(SurvivalModel::Logistic { fit, columns })
}

/// Fits both arms' survival models and assembles the weighted survivor samples.
pub fn principal_strat_components(cohort: &Cohort, opts: &PrincipalOptions) -> Result<PrincipalComponents> {
    let trajectories = cohort.trajectories();
    let mut notes = Vec::new();
    let mut n_indeterminate = 0;
    let mut known: [Vec<(&Trajectory<'_>, bool)>; 2] = [Vec::new(), Vec::new()];
    for t in &trajectories {
        let g = t.subject.group;
        if g > 1 {
            return Err(Error::InvalidInput(format!("subject {} has group {g}", t.subject.id)));
        }
        match vital_status(t, opts.horizon) {
            VitalStatus::Unknown => n_indeterminate += 1,
            VitalStatus::DeadBy => known[g as usize].push((t, false)),
            VitalStatus::AliveAfter => known[g as usize].push((t, true)),
        }
    }
    if n_indeterminate > 0 {
        notes.push(format!(
            "{n_indeterminate} subject(s) with unknown vital status at t={} excluded",
            tlabel(opts.horizon)
        ));
    }

    let mut models = Vec::with_capacity(2);
    for (arm, members) in known.iter().enumerate() {
        let subjects: Vec<&Subject> = members.iter().map(|(t, _)| t.subject).collect();
        let alive: Vec<f64> = members.iter().map(|(_, a)| if *a { 1.0 } else { 0.0 }).collect();
        models.push(fit_survival(&subjects, &alive, &opts.confounders, &opts.logistic, &mut notes, arm as u8)?);
    }
    let survival_models: [SurvivalModel; 2] = [models[0].clone(), models[1].clone()];

    let mut arms = [ArmSample::default(), ArmSample::default()];
    let mut n_survivors = [0usize; 2];
    for z in 0..2 {
        let other = &survival_models[1 - z];
        for (t, alive) in &known[z] {
            if !alive {
                continue;
            }
            n_survivors[z] += 1;
            if let Some(y) = t.value_near(opts.response_time, opts.matching_window) {
                arms[z].ids.push(t.subject.id.to_string());
                arms[z].y.push(y);
                arms[z].weights.push(other.probability(t.subject)?);
            }
        }
        if arms[z].y.is_empty() {
            return Err(Error::Empty(format!(
                "group {z} has no survivors with a response at t={}",
                tlabel(opts.response_time)
            )));
        }
    }
    Ok(PrincipalComponents {
        survival_models,
        arms,
        n_known: [known[0].len(), known[1].len()],
        n_survivors,
        n_indeterminate,
        notes,
    })
}

/// `sum w y / sum w`.
pub fn weighted_mean(y: &[f64], w: &[f64]) -> Result<f64> {
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::InvalidInput("all survivor weights are zero".into()));
    }
    Ok(y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw)
}

/// Linearized standard error of the weighted mean, treating weights as known.
pub fn weighted_mean_se(y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let m = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let n = y.len() as f64;
    let ss: f64 = y.iter().zip(w).map(|(a, b)| (b * (a - m)).powi(2)).sum();
    (ss * n / (n - 1.0).max(1.0)).sqrt() / sw
}

pub fn principal_strat_estimate(cohort: &Cohort, opts: &PrincipalOptions) -> Result<EstimandReport> {
    let comp = principal_strat_components(cohort, opts)?;
    let h = tlabel(opts.horizon);
    let rt = tlabel(opts.response_time);
    let stratum = format!("always-survivor stratum: alive at t={h} under either group");
    let mut report = EstimandReport::new(ModelKind::PrincipalStrat, stratum.clone(), cohort);
    let mut sink = Sink::default();

    let mut means = [0.0; 2];
    let mut ses = [0.0; 2];
    for z in 0..2 {
        let arm = &comp.arms[z];
        means[z] = weighted_mean(&arm.y, &arm.weights)?;
        ses[z] = weighted_mean_se(&arm.y, &arm.weights);
        let name = format!("mean_group{z}");
        sink.push(&name, Variant::Fit, means[z], Unit::Points, format!("mean at t={rt} had everyone been in group {z}, {stratum}"));
        sink.push_se(&name, Variant::Fit, ses[z]);
        sink.push(format!("n_eligible_group{z}"), Variant::Fit, arm.y.len() as f64, Unit::Count, format!("group {z} survivors with a response at t={rt}"));
        sink.push(
            format!("survival_group{z}"),
            Variant::Summary,
            comp.n_survivors[z] as f64 / comp.n_known[z] as f64,
            Unit::Proportion,
            format!("proportion of group {z} alive at t={h}"),
        );
    }
    sink.push("contrast", Variant::Fit, means[1] - means[0], Unit::Points, format!("group 1 minus group 0 at t={rt}, {stratum}"));
    sink.push_se("contrast", Variant::Fit, (ses[0] * ses[0] + ses[1] * ses[1]).sqrt());
    sink.push("n_indeterminate", Variant::Summary, comp.n_indeterminate as f64, Unit::Count, "subjects with unknown vital status");
    sink.into_report(&mut report);
    report.notes = comp.notes;
    report
        .notes
        .push("standard errors treat the survival-model weights as known".into());
    Ok(report)
}
