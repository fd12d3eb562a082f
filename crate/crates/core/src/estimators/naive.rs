use super::report::{EstimandReport, FittedTrajectory, ModelKind, Sink, TrajectoryPoint, Unit, Variant};
use super::spec::{individual_slope, time_grid, tlabel};
use crate::cohort::Cohort;
use crate::{Error, Result};

/// Extends every subject along their own least-squares line and averages.
///
/// Observed values are used where present at the horizon; otherwise the
/// subject's line supplies the value, including past death. Extrapolated
/// values are deliberately left unclamped.
pub fn naive_extrapolation_summary(cohort: &Cohort, horizon: f64, matching_window: f64) -> Result<EstimandReport> {
    let trajectories = cohort.trajectories();
    if trajectories.is_empty() {
        return Err(Error::Empty("cohort has no subjects".into()));
    }
    let mut lines = Vec::with_capacity(trajectories.len());
    for t in &trajectories {
        let pts: Vec<(f64, f64)> = t.observed().collect();
        let line = individual_slope(&pts).ok_or_else(|| {
            Error::InvalidInput(format!(
                "subject {} has fewer than two observed times; no individual slope",
                t.subject.id
            ))
        })?;
        lines.push(line);
    }

    let value_at = |k: usize, time: f64| -> (f64, bool) {
        match trajectories[k].value_near(time, matching_window) {
            Some(v) => (v, false),
            None => (lines[k].0 + lines[k].1 * time, true),
        }
    };

    let n = trajectories.len() as f64;
    let mut extrapolated = 0usize;
    let mut beyond_death = 0usize;
    let mut sum = 0.0;
    for k in 0..trajectories.len() {
        let (v, extra) = value_at(k, horizon);
        sum += v;
        if extra {
            extrapolated += 1;
            if !trajectories[k].subject.alive_at(horizon) {
                beyond_death += 1;
            }
        }
    }
    let mean_slope = lines.iter().map(|l| l.1).sum::<f64>() / n;

    let mut report = EstimandReport::new(
        ModelKind::NaiveExtrapolation,
        "immortal cohort: every subject continued along their own line",
        cohort,
    );
    let h = tlabel(horizon);
    let mut sink = Sink::default();
    sink.push(
        format!("mean_at_{h}"),
        Variant::Summary,
        sum / n,
        Unit::Points,
        format!("mean at t={h}, all subjects, values past death extrapolated"),
    );
    sink.push(
        "mean_slope",
        Variant::Summary,
        mean_slope,
        Unit::PointsPerYear,
        "mean of individual least-squares slopes, all subjects",
    );
    sink.push(format!("n_extrapolated_at_{h}"), Variant::Summary, extrapolated as f64, Unit::Count, "subjects without an observed value at the horizon");
    sink.into_report(&mut report);
    if beyond_death > 0 {
        report
            .notes
            .push(format!("{beyond_death} subject(s) extrapolated beyond death at t={h}"));
    }
    if let Some(b) = cohort.response_bounds {
        let outside = (0..trajectories.len())
            .map(|k| value_at(k, horizon).0)
            .filter(|v| !b.contains(*v))
            .count();
        if outside > 0 {
            report
                .notes
                .push(format!("{outside} value(s) at t={h} fall outside the response bounds"));
        }
    }
    report.trajectories.push(FittedTrajectory {
        group: None,
        stratum: None,
        variant: Variant::Summary,
        points: time_grid(0.0, horizon)
            .into_iter()
            .map(|t| TrajectoryPoint {
                time: t,
                value: (0..trajectories.len()).map(|k| value_at(k, t).0).sum::<f64>() / n,
            })
            .collect(),
    });
    Ok(report)
}
