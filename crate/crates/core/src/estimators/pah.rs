//! Proportion of the baseline cohort alive with a response at or above a
//! health threshold, and the area under that curve.

use serde::{Deserialize, Serialize};

use super::report::{EstimandReport, FittedTrajectory, ModelKind, Sink, TrajectoryPoint, Unit, Variant};
use super::spec::tlabel;
use crate::cohort::{Cohort, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PahOptions {
    pub healthy_threshold: f64,
    pub times: Vec<f64>,
    pub by_group: bool,
    pub matching_window: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PahPoint {
    pub time: f64,
    pub n_alive: usize,
    pub n_alive_healthy: usize,
    /// Alive at `time` but without an observed value there.
    pub n_missing: usize,
    pub pah: f64,
    pub survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PahCurve {
    /// `None` for the whole cohort.
    pub group: Option<u8>,
    pub n_baseline: usize,
    pub points: Vec<PahPoint>,
    /// Trapezoid area under the curve over the requested times.
    pub years_healthy_life: f64,
    /// Average loss per year between the first and last time.
    pub decline_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PahReport {
    pub healthy_threshold: f64,
    pub curves: Vec<PahCurve>,
    pub notes: Vec<String>,
}

fn curve(members: &[&Trajectory<'_>], group: Option<u8>, opts: &PahOptions) -> PahCurve {
    let n = members.len();
    let points: Vec<PahPoint> = opts
        .times
        .iter()
        .map(|&t| {
            let alive: Vec<&&Trajectory<'_>> = members.iter().filter(|m| m.subject.alive_at(t)).collect();
            let mut healthy = 0;
            let mut missing = 0;
            for m in &alive {
                match m.value_near(t, opts.matching_window) {
                    Some(v) if v >= opts.healthy_threshold => healthy += 1,
                    Some(_) => {}
                    None => missing += 1,
                }
            }
            let denom = n.max(1) as f64;
            PahPoint {
                time: t,
                n_alive: alive.len(),
                n_alive_healthy: healthy,
                n_missing: missing,
                pah: healthy as f64 / denom,
                survival: alive.len() as f64 / denom,
            }
        })
        .collect();
    let years_healthy_life = points
        .windows(2)
        .map(|w| 0.5 * (w[0].pah + w[1].pah) * (w[1].time - w[0].time))
        .sum();
    let decline_rate = match (points.first(), points.last()) {
        (Some(a), Some(b)) if b.time > a.time => (a.pah - b.pah) / (b.time - a.time),
        _ => 0.0,
    };
    PahCurve {
        group,
        n_baseline: n,
        points,
        years_healthy_life,
        decline_rate,
    }
}

/// Empirical alive-and-healthy curve. Denominators are the full baseline
/// cohort; survivors with a missing value at `t` are counted as missing, not
/// as healthy or unhealthy.
pub fn joint_pah(cohort: &Cohort, opts: &PahOptions) -> Result<PahReport> {
    if opts.times.is_empty() {
        return Err(Error::InvalidInput("no times requested for the alive-and-healthy curve".into()));
    }
    if opts.times.windows(2).any(|w| w[1] <= w[0]) || opts.times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("times must be finite and strictly increasing".into()));
    }
    let trajectories = cohort.trajectories();
    if trajectories.is_empty() {
        return Err(Error::Empty("cohort has no subjects".into()));
    }
    let mut notes = Vec::new();
    if let Some(max) = cohort.max_time() {
        let beyond: Vec<String> = opts.times.iter().filter(|t| **t > max).map(|t| tlabel(*t)).collect();
        if !beyond.is_empty() {
            notes.push(format!("times beyond follow-up ({}); survivors there count as missing", beyond.join(", ")));
        }
    }
    let all: Vec<&Trajectory<'_>> = trajectories.iter().collect();
    let mut curves = Vec::new();
    if opts.by_group {
        let mut groups: Vec<u8> = trajectories.iter().map(|t| t.subject.group).collect();
        groups.sort_unstable();
        groups.dedup();
        for g in groups {
            let members: Vec<&Trajectory<'_>> = all.iter().copied().filter(|t| t.subject.group == g).collect();
            curves.push(curve(&members, Some(g), opts));
        }
    } else {
        curves.push(curve(&all, None, opts));
    }
    Ok(PahReport {
        healthy_threshold: opts.healthy_threshold,
        curves,
        notes,
    })
}

impl PahReport {
    pub fn to_report(&self, cohort: &Cohort) -> EstimandReport {
        let thr = tlabel(self.healthy_threshold);
        let mut report = EstimandReport::new(
            ModelKind::JointPah,
            format!("entire baseline cohort; healthy means alive with response >= {thr}"),
            cohort,
        );
        let mut sink = Sink::default();
        for c in &self.curves {
            let sfx = c.group.map(|g| format!("_group{g}")).unwrap_or_default();
            let who = c.group.map(|g| format!("group {g}")).unwrap_or_else(|| "whole cohort".into());
            for p in &c.points {
                let t = tlabel(p.time);
                sink.push(format!("pah_at_{t}{sfx}"), Variant::Summary, p.pah, Unit::Proportion, format!("alive and healthy at t={t}, {who} at baseline"));
                sink.push(format!("survival_at_{t}{sfx}"), Variant::Summary, p.survival, Unit::Proportion, format!("alive at t={t}, {who} at baseline"));
                sink.push(format!("n_missing_at_{t}{sfx}"), Variant::Summary, p.n_missing as f64, Unit::Count, format!("alive at t={t} without an observed value, {who}"));
            }
            sink.push(format!("years_healthy_life{sfx}"), Variant::Summary, c.years_healthy_life, Unit::Years, format!("area under the alive-and-healthy curve, {who}"));
            sink.push(format!("decline_rate{sfx}"), Variant::Summary, c.decline_rate, Unit::ProportionPerYear, format!("average share of {who} losing health or life per year"));
            report.trajectories.push(FittedTrajectory {
                group: c.group,
                stratum: None,
                variant: Variant::Summary,
                points: c.points.iter().map(|p| TrajectoryPoint { time: p.time, value: p.pah }).collect(),
            });
        }
        sink.into_report(&mut report);
        report.notes = self.notes.clone();
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{hypothetical_cohort, survivors_at};
    use proptest::prelude::*;

    fn opts(threshold: f64, times: Vec<f64>) -> PahOptions {
        PahOptions {
            healthy_threshold: threshold,
            times,
            by_group: false,
            matching_window: 0.0,
        }
    }

    #[test]
    fn hypothetical_cohort_curve() {
        let r = joint_pah(&hypothetical_cohort(), &opts(80.0, vec![0.0, 5.0])).unwrap();
        let c = &r.curves[0];
        assert_eq!(c.points[0].pah, 0.75);
        assert_eq!(c.points[1].pah, 0.25);
        assert!((c.decline_rate - 0.1).abs() < 1e-15);
        assert!((c.years_healthy_life - 2.5).abs() < 1e-15);
        let full = joint_pah(&hypothetical_cohort(), &opts(80.0, (0..6).map(f64::from).collect())).unwrap();
        let pahs: Vec<f64> = full.curves[0].points.iter().map(|p| p.pah).collect();
        assert_eq!(pahs, vec![0.75, 0.75, 0.5, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn vacuous_threshold_is_alive_with_observation() {
        let r = joint_pah(&hypothetical_cohort(), &opts(-1.0, vec![0.0, 3.0])).unwrap();
        assert_eq!(r.curves[0].points[1].pah, 0.5);
    }

    #[test]
    fn everyone_dead() {
        let c = hypothetical_cohort().subset(|s| s.observed_death_time().is_some());
        let r = joint_pah(&c, &opts(0.0, vec![0.0, 4.0])).unwrap();
        assert_eq!(r.curves[0].points[1].pah, 0.0);
    }

    #[test]
    fn missing_survivors_are_tallied() {
        let mut c = hypothetical_cohort();
        c.observations[5].value = None; // A at t=5
        let r = joint_pah(&c, &opts(80.0, vec![5.0])).unwrap();
        assert_eq!(r.curves[0].points[0].n_missing, 1);
        assert_eq!(r.curves[0].points[0].pah, 0.0);
    }

    #[test]
    fn empty_times_rejected() {
        assert!(joint_pah(&hypothetical_cohort(), &opts(80.0, vec![])).is_err());
    }

    proptest! {
        #[test]
        fn bounded_by_survival(threshold in 0.0f64..100.0, shift in 0usize..4) {
            let c = hypothetical_cohort();
            let times: Vec<f64> = (shift..6).map(|t| t as f64).collect();
            let r = joint_pah(&c, &opts(threshold, times.clone())).unwrap();
            for p in &r.curves[0].points {
                prop_assert!((0.0..=1.0).contains(&p.pah));
                prop_assert!(p.pah <= p.survival);
            }
            let floor = joint_pah(&c, &opts(0.0, times)).unwrap();
            for p in &floor.curves[0].points {
                prop_assert_eq!(p.pah, survivors_at(&c, p.time).len() as f64 / 4.0);
            }
        }
    }
}
