//! Regression-based engines: unconditional mixed model, pattern-mixture,
//! terminal decline and regression conditioning on being alive.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::report::{EstimandReport, FittedTrajectory, ModelKind, Sink, TrajectoryPoint, Unit, Variant};
use super::spec::{
    build_design, individual_slope, observed_rows, quad_se, time_grid, tlabel, BuiltDesign, FitOptions, ModelSpec,
    RandomEffects, Regressor, Row, TimeScale,
};
use crate::cohort::{assign_strata, strata_for, Cohort};
use crate::numerics::{lmm_fit, ols};
use crate::{Error, Result};

/// A fitted mean model: coefficients and the covariance used for inference.
struct MeanModel {
    design: BuiltDesign,
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    notes: Vec<String>,
}

impl MeanModel {
    fn mean(&self, group: u8, age: f64, t: f64) -> (f64, f64) {
        let x = self.design.prediction_row(group, age, t);
        (x.dot(&self.beta), quad_se(&x, &self.cov))
    }
}

fn fit_lmm(design: BuiltDesign, opts: &FitOptions) -> Result<MeanModel> {
    let (Some(i), Some(t)) = (design.index(Regressor::Intercept), design.index(Regressor::Time)) else {
        return Err(Error::InvalidInput(
            "random intercept and slope need 'intercept' and 'time' regressors".into(),
        ));
    };
    let fit = lmm_fit(&design.x, &design.y, [i, t], &opts.lmm)?;
    let mut notes = design.notes.clone();
    notes.push(format!(
        "mixed model: {} observations, {} subjects, loglik {:.6}, sigma2 {:.6}, G = [[{:.6}, {:.6}], [{:.6}, {:.6}]]",
        fit.n_obs, fit.n_clusters, fit.loglik, fit.sigma2, fit.g[(0, 0)], fit.g[(0, 1)], fit.g[(1, 0)], fit.g[(1, 1)]
    ));
    if fit.boundary {
        notes.push("variance components at the boundary of the parameter space".into());
    }
    if !fit.converged {
        notes.push("variance-component optimizer did not meet its tolerance".into());
    }
    Ok(MeanModel {
        beta: fit.beta,
        cov: fit.cov_beta,
        design,
        notes,
    })
}

fn fit_ols(design: BuiltDesign, robust: bool) -> Result<MeanModel> {
    let mut fit = ols(&design.x, &design.y, None)?;
    let mut notes = design.notes.clone();
    notes.push(format!(
        "pooled least squares: {} observations, {} subjects",
        fit.n_obs, fit.n_clusters
    ));
    let cov = if robust {
        fit = fit.with_robust(&design.x, &design.y)?;
        notes.push("standard errors are cluster-robust with subjects as clusters".into());
        fit.cov_robust.clone().expect("robust covariance requested")
    } else {
        fit.cov_model.clone()
    };
    Ok(MeanModel {
        beta: fit.beta,
        cov,
        design,
        notes,
    })
}

fn suffix(base: &str, group: u8, multi: bool) -> String {
    if multi {
        format!("{base}_group{group}")
    } else {
        base.to_string()
    }
}

/// Coefficients, fitted means at `times`, and trajectories on `grid`.
fn emit_model(
    sink: &mut Sink,
    trajectories: &mut Vec<FittedTrajectory>,
    model: &MeanModel,
    groups: &[u8],
    times: &[f64],
    grid: &[f64],
    stratum: Option<&str>,
    reference_age: f64,
    describe: &dyn Fn(f64, u8) -> String,
) {
    for (k, r) in model.design.regressors.iter().enumerate() {
        let name = format!("coef.{}", r.name());
        sink.push(&name, Variant::Fit, model.beta[k], Unit::Coefficient, "model coefficient");
        sink.push_se(&name, Variant::Fit, model.cov[(k, k)].max(0.0).sqrt());
    }
    let multi = groups.len() > 1;
    for &g in groups {
        for &t in times {
            let (m, se) = model.mean(g, reference_age, t);
            let name = suffix(&format!("mean_at_{}", tlabel(t)), g, multi);
            sink.push(&name, Variant::Fit, m, Unit::Points, describe(t, g));
            sink.push_se(&name, Variant::Fit, se);
        }
        trajectories.push(FittedTrajectory {
            group: Some(g),
            stratum: stratum.map(str::to_string),
            variant: Variant::Fit,
            points: grid
                .iter()
                .map(|&t| TrajectoryPoint {
                    time: t,
                    value: model.mean(g, reference_age, t).0,
                })
                .collect(),
        });
    }
}

/// Average change per year between baseline and `h` in the fitted mean.
fn emit_average_slope(sink: &mut Sink, model: &MeanModel, groups: &[u8], h: f64, reference_age: f64, cond: &str) {
    if h == 0.0 {
        return;
    }
    let multi = groups.len() > 1;
    for &g in groups {
        let d = (model.design.prediction_row(g, reference_age, h) - model.design.prediction_row(g, reference_age, 0.0)) / h;
        let name = suffix(&format!("slope_0_to_{}", tlabel(h)), g, multi);
        sink.push(&name, Variant::Fit, d.dot(&model.beta), Unit::PointsPerYear, cond.to_string());
        sink.push_se(&name, Variant::Fit, quad_se(&d, &model.cov));
    }
}

fn span(rows: &[Row<'_>]) -> (f64, f64) {
    rows.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.time), hi.max(r.time)))
}

/// Mixed model with random intercept and slope on all observed rows; deaths
/// are ignored, so the fit describes a cohort in which nobody dies.
pub fn unconditional_fit(cohort: &Cohort, spec: &ModelSpec, opts: &FitOptions) -> Result<EstimandReport> {
    spec.require_scale(TimeScale::FromBaseline, "unconditional fit")?;
    if spec.random_effects != RandomEffects::InterceptSlope {
        return Err(Error::InvalidInput("unconditional fit needs random intercept and slope".into()));
    }
    let rows = observed_rows(cohort, TimeScale::FromBaseline);
    let design = build_design(spec, &rows)?;
    let groups = design.groups(&rows);
    let model = fit_lmm(design, opts)?;

    let mut report = EstimandReport::new(
        ModelKind::Unconditional,
        "immortal cohort: all subjects, values after death treated as missing at random",
        cohort,
    );
    let (_, hi) = span(&rows);
    let grid = time_grid(0.0, hi.max(opts.horizons.iter().copied().fold(0.0, f64::max)));
    let mut sink = Sink::default();
    let age = opts.reference_age;
    emit_model(&mut sink, &mut report.trajectories, &model, &groups, &opts.horizons, &grid, None, age, &|t, g| {
        format!("mean at t={} for group {g}, baseline age {age}, as if no one died", tlabel(t))
    });
    if let Some(&h) = opts.horizons.last() {
        emit_average_slope(&mut sink, &model, &groups, h, age, "average annual change as if no one died");
    }
    sink.into_report(&mut report);
    report.notes = model.notes;
    Ok(report)
}

/// Separate fits within strata defined by time of death, plus the simple
/// per-stratum averages.
pub fn pattern_mixture_fit(
    cohort: &Cohort,
    boundaries: &[f64],
    spec: &ModelSpec,
    opts: &FitOptions,
) -> Result<EstimandReport> {
    spec.require_scale(TimeScale::FromBaseline, "pattern-mixture fit")?;
    let strata = strata_for(boundaries)?;
    let assignment = assign_strata(cohort, boundaries)?;
    let mut report = EstimandReport::new(
        ModelKind::PatternMixture,
        "within stratum of survival time",
        cohort,
    );

    for stratum in strata {
        let label = stratum.label();
        let sub = cohort.subset(|s| assignment.get(&s.id) == Some(&stratum));
        if sub.subjects.is_empty() {
            report.notes.push(format!("stratum '{label}' is empty; skipped"));
            continue;
        }
        let mut sink = Sink::default();
        let mut notes = Vec::new();
        let w = opts.matching_window;
        let trajectories = sub.trajectories();

        for &h in &opts.horizons {
            let vals: Vec<f64> = trajectories.iter().filter_map(|t| t.value_near(h, w)).collect();
            if vals.is_empty() {
                notes.push(format!("no responses at t={}", tlabel(h)));
                continue;
            }
            let name = format!("mean_at_{}", tlabel(h));
            sink.push(
                &name,
                Variant::Summary,
                vals.iter().sum::<f64>() / vals.len() as f64,
                Unit::Points,
                format!("mean at t={} among '{label}' members observed then", tlabel(h)),
            );
            sink.push(format!("n_at_{}", tlabel(h)), Variant::Summary, vals.len() as f64, Unit::Count, label.clone());
        }
        let slopes: Vec<f64> = trajectories
            .iter()
            .filter_map(|t| individual_slope(&t.observed().collect::<Vec<_>>()).map(|(_, b)| b))
            .collect();
        if slopes.len() < trajectories.len() {
            notes.push(format!(
                "{} subject(s) with fewer than two observed times left out of the mean slope",
                trajectories.len() - slopes.len()
            ));
        }
        if !slopes.is_empty() {
            sink.push(
                "mean_slope",
                Variant::Summary,
                slopes.iter().sum::<f64>() / slopes.len() as f64,
                Unit::PointsPerYear,
                format!("mean of individual least-squares slopes within '{label}'"),
            );
        }

        let rows = observed_rows(&sub, TimeScale::FromBaseline);
        let fitted = build_design(spec, &rows).and_then(|design| {
            let use_mixed = spec.random_effects == RandomEffects::InterceptSlope;
            if use_mixed && sub.subjects.len() >= 2 {
                match fit_lmm(design.clone(), opts) {
                    Ok(m) => Ok(m),
                    Err(e) => {
                        notes.push(format!("mixed model failed ({e}); pooled least squares used instead"));
                        fit_ols(design, false)
                    }
                }
            } else {
                if use_mixed {
                    notes.push("fewer than two subjects; pooled least squares used instead of mixed model".into());
                }
                fit_ols(design, false)
            }
        });
        match fitted {
            Ok(model) => {
                let groups = model.design.groups(&rows);
                let (_, hi) = span(&rows);
                let times: Vec<f64> = opts.horizons.iter().copied().filter(|h| *h <= hi).collect();
                let age = opts.reference_age;
                let lbl = label.clone();
                emit_model(
                    &mut sink,
                    &mut report.trajectories,
                    &model,
                    &groups,
                    &times,
                    &time_grid(0.0, hi),
                    Some(&label),
                    age,
                    &|t, g| format!("mean at t={} for group {g}, baseline age {age}, given {lbl}", tlabel(t)),
                );
                notes.extend(model.notes);
            }
            Err(e) => notes.push(format!("fit failed: {e}")),
        }
        report.strata.push(sink.into_stratum(label, sub.subjects.len(), notes));
    }
    Ok(report)
}

/// Response trajectory indexed by years before death, decedents only.
pub fn terminal_decline_fit(cohort: &Cohort, spec: &ModelSpec, opts: &FitOptions) -> Result<EstimandReport> {
    spec.require_scale(TimeScale::FromDeath, "terminal-decline fit")?;
    let rows = observed_rows(cohort, TimeScale::FromDeath);
    let decedents: BTreeMap<&str, usize> = rows.iter().fold(BTreeMap::new(), |mut m, r| {
        *m.entry(r.subject.id.as_str()).or_insert(0) += 1;
        m
    });
    if decedents.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "terminal decline needs at least two decedents with observations, found {}",
            decedents.len()
        )));
    }
    let mut report = EstimandReport::new(
        ModelKind::TerminalDecline,
        "decedents only, time measured backward from death",
        cohort,
    );
    let n_survivors = cohort.subjects.iter().filter(|s| s.observed_death_time().is_none()).count();
    if n_survivors > 0 {
        report.notes.push(format!("{n_survivors} subject(s) without observed death excluded"));
    }
    let mut sink = Sink::default();

    let pooled = build_design(&ModelSpec::linear_time(RandomEffects::None, TimeScale::FromDeath), &rows)
        .and_then(|d| fit_ols(d, false))?;
    let k = pooled.design.index(Regressor::Time).expect("linear design has time");
    sink.push(
        "pooled_slope",
        Variant::Summary,
        pooled.beta[k],
        Unit::PointsPerYear,
        "pooled least-squares change per year approaching death, decedents",
    );
    sink.push_se("pooled_slope", Variant::Summary, pooled.cov[(k, k)].sqrt());

    let design = build_design(spec, &rows)?;
    let groups = design.groups(&rows);
    let model = match spec.random_effects {
        RandomEffects::InterceptSlope => fit_lmm(design, opts)?,
        RandomEffects::None => fit_ols(design, false)?,
    };
    if let Some(k) = model.design.index(Regressor::Time) {
        sink.push("slope", Variant::Fit, model.beta[k], Unit::PointsPerYear, "change per year approaching death");
        sink.push_se("slope", Variant::Fit, model.cov[(k, k)].sqrt());
    }
    if let Some(k) = model.design.index(Regressor::Time2) {
        sink.push("quadratic", Variant::Fit, model.beta[k], Unit::PointsPerYear2, "quadratic term in years from death");
        sink.push_se("quadratic", Variant::Fit, model.cov[(k, k)].sqrt());
    }
    let (lo, hi) = span(&rows);
    let times: Vec<f64> = opts.years_before_death.iter().map(|y| -y.abs()).collect();
    let age = opts.reference_age;
    emit_model(&mut sink, &mut report.trajectories, &model, &groups, &times, &time_grid(lo, hi), None, age, &|t, g| {
        format!("mean {} year(s) before death for group {g}, baseline age {age}, decedents", tlabel(-t))
    });
    sink.into_report(&mut report);
    report.notes.extend(model.notes);
    Ok(report)
}

/// Pooled regression treating every observed row as independent, with
/// subject-clustered robust covariance. Estimates describe the survivors
/// present at each time.
pub fn rca_fit(cohort: &Cohort, spec: &ModelSpec, opts: &FitOptions) -> Result<EstimandReport> {
    spec.require_scale(TimeScale::FromBaseline, "regression conditioning on being alive")?;
    if spec.random_effects != RandomEffects::None {
        return Err(Error::InvalidInput(
            "regression conditioning on being alive uses no random effects".into(),
        ));
    }
    let rows = observed_rows(cohort, TimeScale::FromBaseline);
    let design = build_design(spec, &rows)?;
    let groups = design.groups(&rows);
    let model = fit_ols(design, true)?;

    let mut report = EstimandReport::new(ModelKind::Rca, "given alive at t", cohort);
    let mut sink = Sink::default();
    let traj = cohort.trajectories();
    for &h in &opts.horizons {
        let vals: Vec<f64> = traj
            .iter()
            .filter(|t| t.subject.alive_at(h))
            .filter_map(|t| t.value_near(h, opts.matching_window))
            .collect();
        if !vals.is_empty() {
            sink.push(
                format!("cross_sectional_mean_at_{}", tlabel(h)),
                Variant::Summary,
                vals.iter().sum::<f64>() / vals.len() as f64,
                Unit::Points,
                format!("observed mean at t={} given alive at t", tlabel(h)),
            );
        }
    }
    let (_, hi) = span(&rows);
    let age = opts.reference_age;
    emit_model(&mut sink, &mut report.trajectories, &model, &groups, &opts.horizons, &time_grid(0.0, hi), None, age, &|t, g| {
        format!("mean at t={} for group {g}, baseline age {age}, given alive at t", tlabel(t))
    });
    if let Some(&h) = opts.horizons.last() {
        emit_average_slope(&mut sink, &model, &groups, h, age, "average annual change in the survivors' mean");
    }
    sink.into_report(&mut report);
    report.notes = model.notes;
    Ok(report)
}
