//! Cohort data model: subjects with survival information and a long-format
//! table of timed response observations.
//!
//! A subject's response vector stops at death. Observation times are years
//! from baseline; a subject with an observed death may only have
//! observations strictly before the survival time.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub String);

impl SubjectId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for SubjectId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for SubjectId {
    fn from(s: &str) -> Self {
        SubjectId(s.to_string())
    }
}

impl From<String> for SubjectId {
    fn from(s: String) -> Self {
        SubjectId(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: SubjectId,
    /// Age in years at baseline.
    pub baseline_age: f64,
    /// Binary covariate code, 0 or 1.
    pub group: u8,
    /// Years from baseline to death; present only when the death was observed.
    pub survival_time: Option<f64>,
    pub death_observed: bool,
    pub extra_covariates: Vec<(String, f64)>,
}

impl Subject {
    pub fn survivor(id: impl Into<SubjectId>, baseline_age: f64, group: u8) -> Self {
        Subject {
            id: id.into(),
            baseline_age,
            group,
            survival_time: None,
            death_observed: false,
            extra_covariates: Vec::new(),
        }
    }

    pub fn decedent(id: impl Into<SubjectId>, baseline_age: f64, group: u8, survival_time: f64) -> Self {
        Subject {
            id: id.into(),
            baseline_age,
            group,
            survival_time: Some(survival_time),
            death_observed: true,
            extra_covariates: Vec::new(),
        }
    }

    /// Alive at `t` years from baseline: no observed death, or death after `t`.
    pub fn alive_at(&self, t: f64) -> bool {
        match (self.death_observed, self.survival_time) {
            (true, Some(s)) => s > t,
            _ => true,
        }
    }

    pub fn observed_death_time(&self) -> Option<f64> {
        if self.death_observed {
            self.survival_time
        } else {
            None
        }
    }

    /// Looks up a named covariate. `baseline_age` and `group` resolve to the
    /// built-in fields; anything else is searched in `extra_covariates`.
    pub fn covariate(&self, name: &str) -> Option<f64> {
        match name {
            "baseline_age" => Some(self.baseline_age),
            "group" => Some(f64::from(self.group)),
            _ => self
                .extra_covariates
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| *v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject_id: SubjectId,
    /// Years from baseline (or from death, in the terminal-decline view).
    pub time: f64,
    /// Response value; `None` when missing due to nonresponse.
    pub value: Option<f64>,
}

impl Observation {
    pub fn new(subject_id: impl Into<SubjectId>, time: f64, value: Option<f64>) -> Self {
        Observation {
            subject_id: subject_id.into(),
            time,
            value,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.value.is_none()
    }
}

/// Closed interval of valid response values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Self {
        Bounds { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub observations: Vec<Observation>,
    pub response_bounds: Option<Bounds>,
}

/// One subject together with its observations in storage order.
#[derive(Debug, Clone)]
pub struct Trajectory<'a> {
    pub subject: &'a Subject,
    pub observations: Vec<&'a Observation>,
}

impl<'a> Trajectory<'a> {
    /// Observed (time, value) pairs, skipping missing values.
    pub fn observed(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.observations
            .iter()
            .filter_map(|o| o.value.map(|v| (o.time, v)))
    }

    /// Observed value at `t`, matched within `window` years. The closest
    /// observation wins; ties go to the earlier one.
    pub fn value_near(&self, t: f64, window: f64) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (time, v) in self.observed() {
            let d = (time - t).abs();
            if d <= window + 1e-12 && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, v));
            }
        }
        best.map(|(_, v)| v)
    }
}

impl Cohort {
    pub fn new(subjects: Vec<Subject>, observations: Vec<Observation>) -> Self {
        Cohort {
            subjects,
            observations,
            response_bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.response_bounds = Some(bounds);
        self
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id.as_str() == id)
    }

    /// Subjects in storage order, each with its own observations.
    /// Observations referring to unknown subjects are dropped.
    pub fn trajectories(&self) -> Vec<Trajectory<'_>> {
        let index: HashMap<&str, usize> = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut out: Vec<Trajectory<'_>> = self
            .subjects
            .iter()
            .map(|s| Trajectory {
                subject: s,
                observations: Vec::new(),
            })
            .collect();
        for o in &self.observations {
            if let Some(&i) = index.get(o.subject_id.as_str()) {
                out[i].observations.push(o);
            }
        }
        out
    }

    /// Restricts the cohort to the given subjects, keeping storage order.
    pub fn subset<F>(&self, mut keep: F) -> Cohort
    where
        F: FnMut(&Subject) -> bool,
    {
        let subjects: Vec<Subject> = self.subjects.iter().filter(|s| keep(s)).cloned().collect();
        let ids: BTreeSet<&str> = subjects.iter().map(|s| s.id.as_str()).collect();
        let observations = self
            .observations
            .iter()
            .filter(|o| ids.contains(o.subject_id.as_str()))
            .cloned()
            .collect();
        Cohort {
            subjects,
            observations,
            response_bounds: self.response_bounds,
        }
    }

    pub fn missing_count(&self) -> usize {
        self.observations.iter().filter(|o| o.is_missing()).count()
    }

    pub fn max_time(&self) -> Option<f64> {
        self.observations
            .iter()
            .map(|o| o.time)
            .fold(None, |acc, t| Some(acc.map_or(t, |a: f64| a.max(t))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateSubject,
    InvalidGroup,
    NonFiniteCovariate,
    NonPositiveSurvival,
    SurvivalWithoutDeath,
    DeathWithoutSurvival,
    UnknownSubject,
    NegativeTime,
    NonFiniteValue,
    DuplicateTime,
    TimesNotIncreasing,
    PostDeathObservation,
    OutOfBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub subject_id: SubjectId,
    /// Index into `Cohort::observations` when the violation concerns a row.
    pub observation: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.observation {
            Some(i) => write!(f, "subject {} (observation {}): {}", self.subject_id, i, self.detail),
            None => write!(f, "subject {}: {}", self.subject_id, self.detail),
        }
    }
}

/// Checks every cohort invariant and returns the list of breaches. An empty
/// list means the cohort is valid.
pub fn validate(cohort: &Cohort) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject_id: &SubjectId, observation: Option<usize>, rule: Rule, detail: String| {
        out.push(Violation {
            subject_id: subject_id.clone(),
            observation,
            rule,
            detail,
        })
    };

    let mut seen: HashMap<&str, &Subject> = HashMap::new();
    for s in &cohort.subjects {
        if seen.insert(s.id.as_str(), s).is_some() {
            push(&s.id, None, Rule::DuplicateSubject, "subject id appears more than once".into());
        }
        if s.group > 1 {
            push(&s.id, None, Rule::InvalidGroup, format!("group {} is not 0 or 1", s.group));
        }
        if !s.baseline_age.is_finite() || s.extra_covariates.iter().any(|(_, v)| !v.is_finite()) {
            push(&s.id, None, Rule::NonFiniteCovariate, "non-finite covariate".into());
        }
        match (s.death_observed, s.survival_time) {
            (true, Some(t)) if !(t > 0.0) || !t.is_finite() => {
                push(&s.id, None, Rule::NonPositiveSurvival, format!("survival time {t} is not positive"))
            }
            (false, Some(t)) => push(
                &s.id,
                None,
                Rule::SurvivalWithoutDeath,
                format!("survival time {t} given without an observed death"),
            ),
            (true, None) => push(
                &s.id,
                None,
                Rule::DeathWithoutSurvival,
                "death observed but survival time missing".into(),
            ),
            _ => {}
        }
    }

    let mut last_time: HashMap<&str, f64> = HashMap::new();
    for (i, o) in cohort.observations.iter().enumerate() {
        let Some(s) = seen.get(o.subject_id.as_str()) else {
            push(&o.subject_id, Some(i), Rule::UnknownSubject, "observation for unknown subject".into());
            continue;
        };
        if !o.time.is_finite() || o.time < 0.0 {
            push(&o.subject_id, Some(i), Rule::NegativeTime, format!("time {} is negative or non-finite", o.time));
        }
        if let Some(prev) = last_time.insert(o.subject_id.as_str(), o.time) {
            if o.time == prev {
                push(&o.subject_id, Some(i), Rule::DuplicateTime, format!("time {} repeats", o.time));
            } else if o.time < prev {
                push(
                    &o.subject_id,
                    Some(i),
                    Rule::TimesNotIncreasing,
                    format!("time {} follows {}", o.time, prev),
                );
            }
        }
        if let Some(st) = s.observed_death_time() {
            if o.time >= st {
                push(
                    &o.subject_id,
                    Some(i),
                    Rule::PostDeathObservation,
                    format!("observation at time {} is not before death at {}", o.time, st),
                );
            }
        }
        if let Some(v) = o.value {
            if !v.is_finite() {
                push(&o.subject_id, Some(i), Rule::NonFiniteValue, "non-finite value".into());
            } else if let Some(b) = cohort.response_bounds {
                if !b.contains(v) {
                    push(
                        &o.subject_id,
                        Some(i),
                        Rule::OutOfBounds,
                        format!("value {v} outside [{}, {}]", b.lo, b.hi),
                    );
                }
            }
        }
    }
    out
}

/// Subjects alive at `t`: no observed death, or survival time after `t`.
pub fn survivors_at(cohort: &Cohort, t: f64) -> BTreeSet<SubjectId> {
    cohort
        .subjects
        .iter()
        .filter(|s| s.alive_at(t))
        .map(|s| s.id.clone())
        .collect()
}

/// A stratum defined by survival time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeathStratum {
    /// Death observed with survival time in `[lo, hi)`.
    Decedent { lo: f64, hi: f64 },
    /// No observed death.
    Survivor,
}

impl DeathStratum {
    pub fn label(&self) -> String {
        match *self {
            DeathStratum::Decedent { lo, hi } if hi.is_infinite() => format!("death in [{lo}, inf)"),
            DeathStratum::Decedent { lo, hi } => format!("death in [{lo}, {hi})"),
            DeathStratum::Survivor => "survivor".to_string(),
        }
    }

    pub fn contains(&self, subject: &Subject) -> bool {
        match (*self, subject.observed_death_time()) {
            (DeathStratum::Survivor, None) => true,
            (DeathStratum::Decedent { lo, hi }, Some(s)) => s >= lo && s < hi,
            _ => false,
        }
    }
}

impl fmt::Display for DeathStratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The decedent bins implied by `boundaries`, in increasing order, followed by
/// the survivor stratum. Bins below the first boundary start at 0 and the last
/// bin is open-ended, so the survival axis is always fully covered.
pub fn strata_for(boundaries: &[f64]) -> crate::Result<Vec<DeathStratum>> {
    if boundaries.iter().any(|b| !b.is_finite()) {
        return Err(crate::Error::InvalidInput("stratum boundaries must be finite".into()));
    }
    if boundaries.windows(2).any(|w| w[1] <= w[0]) {
        return Err(crate::Error::InvalidInput(
            "stratum boundaries must be strictly increasing".into(),
        ));
    }
    let mut edges = Vec::with_capacity(boundaries.len() + 2);
    if boundaries.first().map_or(true, |&b| b > 0.0) {
        edges.push(0.0);
    }
    edges.extend_from_slice(boundaries);
    edges.push(f64::INFINITY);
    let mut strata: Vec<DeathStratum> = edges
        .windows(2)
        .map(|w| DeathStratum::Decedent { lo: w[0], hi: w[1] })
        .collect();
    strata.push(DeathStratum::Survivor);
    Ok(strata)
}

/// Maps every subject to its death stratum.
pub fn assign_strata(
    cohort: &Cohort,
    boundaries: &[f64],
) -> crate::Result<BTreeMap<SubjectId, DeathStratum>> {
    let strata = strata_for(boundaries)?;
    let mut out = BTreeMap::new();
    for s in &cohort.subjects {
        let stratum = strata
            .iter()
            .find(|st| st.contains(s))
            .copied()
            // survival times below the first boundary when it is negative
            .unwrap_or(DeathStratum::Decedent {
                lo: f64::NEG_INFINITY,
                hi: boundaries.first().copied().unwrap_or(f64::INFINITY),
            });
        out.insert(s.id.clone(), stratum);
    }
    Ok(out)
}

/// Observations of decedents re-indexed to years from death (`t - survival_time`,
/// always negative). Subjects without an observed death contribute nothing.
pub fn years_from_death_view(cohort: &Cohort) -> Vec<Observation> {
    let deaths: HashMap<&str, f64> = cohort
        .subjects
        .iter()
        .filter_map(|s| s.observed_death_time().map(|t| (s.id.as_str(), t)))
        .collect();
    cohort
        .observations
        .iter()
        .filter_map(|o| {
            deaths.get(o.subject_id.as_str()).map(|&st| Observation {
                subject_id: o.subject_id.clone(),
                time: o.time - st,
                value: o.value,
            })
        })
        .collect()
}

/// The four-subject hypothetical cohort: baseline age 70, annual visits for
/// six years, two subjects dying three years after baseline.
pub fn hypothetical_cohort() -> Cohort {
    let series: [(&str, &[f64], Option<f64>); 4] = [
        ("A", &[90.0, 90.0, 90.0, 90.0, 90.0, 90.0], None),
        ("B", &[84.0, 82.0, 80.0, 78.0, 76.0, 74.0], None),
        ("C", &[84.0, 80.0, 76.0], Some(3.0)),
        ("D", &[65.0, 50.0, 35.0], Some(3.0)),
    ];
    let mut subjects = Vec::new();
    let mut observations = Vec::new();
    for (id, values, death) in series {
        subjects.push(match death {
            Some(s) => Subject::decedent(id, 70.0, 0, s),
            None => Subject::survivor(id, 70.0, 0),
        });
        for (t, v) in values.iter().enumerate() {
            observations.push(Observation::new(id, t as f64, Some(*v)));
        }
    }
    Cohort::new(subjects, observations).with_bounds(Bounds::new(0.0, 100.0))
}
