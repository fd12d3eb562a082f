use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::io::{fingerprint, fmt_f64};
use crate::{Error, Result};

/// Identifies the engine that produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Unconditional,
    NaiveExtrapolation,
    PatternMixture,
    PrincipalStrat,
    TerminalDecline,
    Rca,
    JointPah,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Unconditional,
        ModelKind::NaiveExtrapolation,
        ModelKind::PatternMixture,
        ModelKind::PrincipalStrat,
        ModelKind::TerminalDecline,
        ModelKind::Rca,
        ModelKind::JointPah,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Unconditional => "unconditional",
            ModelKind::NaiveExtrapolation => "naive_extrapolation",
            ModelKind::PatternMixture => "pattern_mixture",
            ModelKind::PrincipalStrat => "principal_strat",
            ModelKind::TerminalDecline => "terminal_decline",
            ModelKind::Rca => "rca",
            ModelKind::JointPah => "joint_pah",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model kind '{s}'")))
    }
}

/// `summary` estimates use the simple averages of hand arithmetic;
/// `fit` estimates come from a regression model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Summary,
    Fit,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Summary => "summary",
            Variant::Fit => "fit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "points")]
    Points,
    #[serde(rename = "points/year")]
    PointsPerYear,
    #[serde(rename = "points/year^2")]
    PointsPerYear2,
    #[serde(rename = "proportion")]
    Proportion,
    #[serde(rename = "proportion/year")]
    ProportionPerYear,
    #[serde(rename = "years")]
    Years,
    #[serde(rename = "count")]
    Count,
    #[serde(rename = "coefficient")]
    Coefficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub variant: Variant,
    pub value: f64,
    pub unit: Unit,
    /// The population the value describes, e.g. "mean at t=5 given alive at t".
    pub conditioning: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTrajectory {
    pub group: Option<u8>,
    pub stratum: Option<String>,
    pub variant: Variant,
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StratumReport {
    pub label: String,
    pub n_subjects: usize,
    pub estimates: Vec<Estimate>,
    pub standard_errors: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl StratumReport {
    pub fn estimate(&self, variant: Variant, name: &str) -> Option<f64> {
        find(&self.estimates, variant, name)
    }
}

fn find(estimates: &[Estimate], variant: Variant, name: &str) -> Option<f64> {
    estimates
        .iter()
        .find(|e| e.variant == variant && e.name == name)
        .map(|e| e.value)
}

/// Key under which the standard error of an estimate is stored.
pub fn se_key(variant: Variant, name: &str) -> String {
    format!("{}.{}", variant.as_str(), name)
}

/// Output of one estimand engine. Reports of different kinds describe
/// different populations and are never pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub model_kind: ModelKind,
    /// Conditioning set shared by the report's estimates.
    pub conditioning: String,
    pub cohort_fingerprint: String,
    pub estimates: Vec<Estimate>,
    pub standard_errors: BTreeMap<String, f64>,
    pub strata: Vec<StratumReport>,
    pub trajectories: Vec<FittedTrajectory>,
    pub notes: Vec<String>,
}

impl EstimandReport {
    pub fn new(model_kind: ModelKind, conditioning: impl Into<String>, cohort: &Cohort) -> Self {
        EstimandReport {
            model_kind,
            conditioning: conditioning.into(),
            cohort_fingerprint: fingerprint(cohort),
            estimates: Vec::new(),
            standard_errors: BTreeMap::new(),
            strata: Vec::new(),
            trajectories: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn estimate(&self, variant: Variant, name: &str) -> Option<f64> {
        find(&self.estimates, variant, name)
    }

    pub fn standard_error(&self, variant: Variant, name: &str) -> Option<f64> {
        self.standard_errors.get(&se_key(variant, name)).copied()
    }

    pub fn stratum(&self, label: &str) -> Option<&StratumReport> {
        self.strata.iter().find(|s| s.label == label)
    }

    /// Plot-ready `group,stratum,time,value` rows for every trajectory.
    pub fn write_trajectories_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "stratum", "time", "value"])?;
        for t in &self.trajectories {
            let group = t.group.map(|g| g.to_string()).unwrap_or_default();
            let stratum = t.stratum.clone().unwrap_or_default();
            for p in &t.points {
                w.write_record([group.as_str(), stratum.as_str(), &fmt_f64(p.time), &fmt_f64(p.value)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Collects estimates (with optional standard errors) for either a report or a stratum.
#[derive(Debug, Default)]
pub(crate) struct Sink {
    pub estimates: Vec<Estimate>,
    pub standard_errors: BTreeMap<String, f64>,
}

impl Sink {
    pub fn push(&mut self, name: impl Into<String>, variant: Variant, value: f64, unit: Unit, conditioning: impl Into<String>) {
        self.estimates.push(Estimate {
            name: name.into(),
            variant,
            value,
            unit,
            conditioning: conditioning.into(),
        });
    }

    pub fn push_se(&mut self, name: &str, variant: Variant, se: f64) {
        self.standard_errors.insert(se_key(variant, name), se);
    }

    pub fn into_report(self, report: &mut EstimandReport) {
        report.estimates.extend(self.estimates);
        report.standard_errors.extend(self.standard_errors);
    }

    pub fn into_stratum(self, label: String, n_subjects: usize, notes: Vec<String>) -> StratumReport {
        StratumReport {
            label,
            n_subjects,
            estimates: self.estimates,
            standard_errors: self.standard_errors,
            notes,
        }
    }
}
