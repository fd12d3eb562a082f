//! Synthetic cohorts whose mortality depends on the evolving latent response.
//!
//! Each subject gets a baseline age, a group, a random intercept and slope,
//! and annual visits at `t = 0..=horizon`. After the visit at `t` the subject
//! dies with probability `logistic(hazard_intercept + hazard_response_coef * mu(t)
//! + hazard_age_coef * (age - age_centre) + hazard_group_coef * group)`, with
//! death recorded at `t + 0.5`.
//!
//! Every subject draws from its own ChaCha stream, so results do not depend on
//! generation order. Both arms' potential outcomes share the subject's
//! response draws; each arm has its own death uniforms, so whether a subject
//! would die under the other arm is independent of the realized arm's fate
//! given the subject's covariates and latent trajectory.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Bounds, Cohort, Observation, Subject};
use crate::io::fmt_f64;
use crate::numerics::logistic::sigmoid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupParams {
    pub intercept_mean: f64,
    pub intercept_sd: f64,
    pub slope_mean: f64,
    pub slope_sd: f64,
    #[serde(default)]
    pub quadratic_coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Missing keys take their values from `SimConfig::default()`.
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub seed: u64,
    /// Last visit year; visits at 0, 1, ..., horizon.
    pub horizon: u32,
    pub baseline_age_range: [f64; 2],
    pub p_group: f64,
    /// Response parameters for group 0 and group 1.
    pub groups: [GroupParams; 2],
    pub residual_sd: f64,
    pub hazard_intercept: f64,
    pub hazard_response_coef: f64,
    pub hazard_age_coef: f64,
    pub hazard_group_coef: f64,
    /// Shift of the latent intercept per year of baseline age above `age_centre`.
    pub response_age_coef: f64,
    pub age_centre: f64,
    pub nonresponse_prob: f64,
    pub response_bounds: Option<Bounds>,
    pub emit_counterfactuals: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_subjects: 1000,
            seed: 1,
            horizon: 9,
            baseline_age_range: [65.0, 80.0],
            p_group: 0.5,
            groups: [
                GroupParams {
                    intercept_mean: 90.0,
                    intercept_sd: 5.0,
                    slope_mean: -1.0,
                    slope_sd: 1.0,
                    quadratic_coef: -0.05,
                },
                GroupParams {
                    intercept_mean: 89.0,
                    intercept_sd: 5.0,
                    slope_mean: -1.2,
                    slope_sd: 1.0,
                    quadratic_coef: -0.05,
                },
            ],
            residual_sd: 3.0,
            hazard_intercept: 2.0,
            hazard_response_coef: -0.06,
            hazard_age_coef: 0.05,
            hazard_group_coef: 0.0,
            response_age_coef: -0.3,
            age_centre: 70.0,
            nonresponse_prob: 0.05,
            response_bounds: Some(Bounds::new(0.0, 100.0)),
            emit_counterfactuals: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("simulation config: {m}")));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        let [lo, hi] = self.baseline_age_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("baseline_age_range must be a finite interval");
        }
        for (name, p) in [("p_group", self.p_group), ("nonresponse_prob", self.nonresponse_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        let sds = self
            .groups
            .iter()
            .flat_map(|g| [g.intercept_sd, g.slope_sd])
            .chain([self.residual_sd]);
        for sd in sds {
            if !(sd >= 0.0 && sd.is_finite()) {
                return bad("standard deviations must be finite and non-negative");
            }
        }
        let coefs = self
            .groups
            .iter()
            .flat_map(|g| [g.intercept_mean, g.slope_mean, g.quadratic_coef])
            .chain([self.hazard_response_coef, self.hazard_age_coef, self.hazard_group_coef, self.response_age_coef, self.age_centre]);
        for c in coefs {
            if !c.is_finite() {
                return bad("coefficients must be finite");
            }
        }
        // an infinite intercept switches mortality fully off or on
        if self.hazard_intercept.is_nan() {
            return bad("hazard_intercept is NaN");
        }
        if let Some(b) = self.response_bounds {
            if !(b.lo.is_finite() && b.hi.is_finite() && b.lo <= b.hi) {
                return bad("response_bounds must be a finite interval");
            }
        }
        Ok(())
    }
}

/// Potential outcomes of one subject under both group assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectOutcomes {
    pub id: String,
    pub baseline_age: f64,
    pub realized: u8,
    /// Survival time under each arm; `None` when alive through the horizon.
    pub survival: [Option<f64>; 2],
    /// Death by the simulation horizon under each arm.
    pub dead_by_horizon: [bool; 2],
    /// Latent (noise-free) responses at t = 0..=horizon under each arm.
    pub latent: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeFrame {
    pub horizon: u32,
    pub subjects: Vec<SubjectOutcomes>,
}

impl PotentialOutcomeFrame {
    /// `subject_id,arm,survival_time,d_horizon,y_t0,...,y_tH`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["subject_id".to_string(), "arm".into(), "survival_time".into(), "d_horizon".into()];
        header.extend((0..=self.horizon).map(|t| format!("y_t{t}")));
        w.write_record(&header)?;
        for s in &self.subjects {
            for z in 0..2 {
                let mut row = vec![
                    s.id.clone(),
                    z.to_string(),
                    s.survival[z].map(fmt_f64).unwrap_or_default(),
                    u8::from(s.dead_by_horizon[z]).to_string(),
                ];
                row.extend(s.latent[z].iter().map(|v| fmt_f64(*v)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub cohort: Cohort,
    pub frame: Option<PotentialOutcomeFrame>,
}

struct Draws {
    age: f64,
    group: u8,
    z: [f64; 2],
    noise: Vec<f64>,
    nonresponse: Vec<f64>,
    death: [Vec<f64>; 2],
}

fn draws(cfg: &SimConfig, index: usize) -> Draws {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let h = cfg.horizon as usize;
    let [lo, hi] = cfg.baseline_age_range;
    let age = lo + (hi - lo) * rng.random::<f64>();
    let group = u8::from(rng.random::<f64>() < cfg.p_group);
    let z = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
    let noise = (0..=h).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nonresponse = (0..=h).map(|_| rng.random::<f64>()).collect();
    let d0 = (0..h).map(|_| rng.random::<f64>()).collect();
    let d1 = (0..h).map(|_| rng.random::<f64>()).collect();
    Draws {
        age,
        group,
        z,
        noise,
        nonresponse,
        death: [d0, d1],
    }
}

fn latent(cfg: &SimConfig, d: &Draws, arm: usize) -> Vec<f64> {
    let g = &cfg.groups[arm];
    let a = g.intercept_mean + cfg.response_age_coef * (d.age - cfg.age_centre) + g.intercept_sd * d.z[0];
    let b = g.slope_mean + g.slope_sd * d.z[1];
    (0..=cfg.horizon)
        .map(|t| {
            let t = t as f64;
            a + b * t + g.quadratic_coef * t * t
        })
        .collect()
}

fn survival(cfg: &SimConfig, d: &Draws, arm: usize, mu: &[f64]) -> Option<f64> {
    let base = cfg.hazard_intercept + cfg.hazard_age_coef * (d.age - cfg.age_centre) + cfg.hazard_group_coef * arm as f64;
    (0..cfg.horizon as usize)
        .find(|&t| d.death[arm][t] < sigmoid(base + cfg.hazard_response_coef * mu[t]))
        .map(|t| t as f64 + 0.5)
}

/// Generates a cohort (and, when configured, both arms' potential outcomes).
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let width = (cfg.n_subjects.max(1) as f64).log10().floor() as usize + 1;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut observations = Vec::new();
    let mut outcomes = Vec::new();
    for i in 0..cfg.n_subjects {
        let id = format!("S{:0width$}", i + 1);
        let d = draws(cfg, i);
        let arms: [Vec<f64>; 2] = [latent(cfg, &d, 0), latent(cfg, &d, 1)];
        let surv = [survival(cfg, &d, 0, &arms[0]), survival(cfg, &d, 1, &arms[1])];
        let z = d.group as usize;

        subjects.push(match surv[z] {
            Some(s) => Subject::decedent(id.as_str(), d.age, d.group, s),
            None => Subject::survivor(id.as_str(), d.age, d.group),
        });
        for t in 0..=cfg.horizon as usize {
            if surv[z].is_some_and(|s| s <= t as f64) {
                break;
            }
            let value = if d.nonresponse[t] < cfg.nonresponse_prob {
                None
            } else {
                let v = arms[z][t] + cfg.residual_sd * d.noise[t];
                Some(cfg.response_bounds.map_or(v, |b| b.clamp(v)))
            };
            observations.push(Observation::new(id.as_str(), t as f64, value));
        }
        if cfg.emit_counterfactuals {
            let h = cfg.horizon as f64;
            outcomes.push(SubjectOutcomes {
                id: id.clone(),
                baseline_age: d.age,
                realized: d.group,
                survival: surv,
                dead_by_horizon: [surv[0].is_some_and(|s| s <= h), surv[1].is_some_and(|s| s <= h)],
                latent: arms,
            });
        }
    }
    let mut cohort = Cohort::new(subjects, observations);
    cohort.response_bounds = cfg.response_bounds;
    Ok(Simulation {
        cohort,
        frame: cfg.emit_counterfactuals.then(|| PotentialOutcomeFrame {
            horizon: cfg.horizon,
            subjects: outcomes,
        }),
    })
}

/// Exact survivor-stratum quantities enumerated from a potential-outcome frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimands {
    pub horizon: f64,
    pub response_time: f64,
    /// Subjects alive at the horizon under both arms.
    pub n_always_survivors: usize,
    /// E[Y(z) | alive under both arms].
    pub always_survivor_mean: [f64; 2],
    pub always_survivor_sd: [f64; 2],
    pub contrast: f64,
    /// E[Y(z) | alive under arm z].
    pub survivor_mean: [f64; 2],
    pub population_mean: [f64; 2],
}

/// Enumerates the always-survivor stratum at `horizon` and averages the latent
/// responses at the integer visit `response_time`.
pub fn true_estimands(frame: &PotentialOutcomeFrame, horizon: f64, response_time: f64) -> Result<OracleEstimands> {
    if response_time < 0.0 || response_time.fract() != 0.0 || response_time > frame.horizon as f64 {
        return Err(Error::InvalidInput(format!(
            "response time {response_time} is not a visit in 0..={}",
            frame.horizon
        )));
    }
    let k = response_time as usize;
    let dead = |s: &SubjectOutcomes, z: usize| s.survival[z].is_some_and(|t| t <= horizon);
    let mean_sd = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (m, sd)
    };
    let always: Vec<&SubjectOutcomes> = frame.subjects.iter().filter(|s| !dead(s, 0) && !dead(s, 1)).collect();
    if always.is_empty() {
        return Err(Error::Empty("nobody survives the horizon under both arms".into()));
    }
    let mut always_survivor_mean = [0.0; 2];
    let mut always_survivor_sd = [0.0; 2];
    let mut survivor_mean = [f64::NAN; 2];
    let mut population_mean = [0.0; 2];
    for z in 0..2 {
        let v: Vec<f64> = always.iter().map(|s| s.latent[z][k]).collect();
        (always_survivor_mean[z], always_survivor_sd[z]) = mean_sd(&v);
        let surv: Vec<f64> = frame.subjects.iter().filter(|s| !dead(s, z)).map(|s| s.latent[z][k]).collect();
        survivor_mean[z] = mean_sd(&surv).0;
        let all: Vec<f64> = frame.subjects.iter().map(|s| s.latent[z][k]).collect();
        population_mean[z] = mean_sd(&all).0;
    }
    Ok(OracleEstimands {
        horizon,
        response_time,
        n_always_survivors: always.len(),
        always_survivor_mean,
        always_survivor_sd,
        contrast: always_survivor_mean[1] - always_survivor_mean[0],
        survivor_mean,
        population_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::validate;
    use proptest::prelude::*;

    fn small(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_subjects: n,
            seed,
            emit_counterfactuals: true,
            ..Default::default()
        }
    }

    #[test]
    fn zero_hazard_means_no_deaths() {
        let cfg = SimConfig {
            hazard_intercept: f64::NEG_INFINITY,
            nonresponse_prob: 0.0,
            ..small(200, 3)
        };
        let sim = simulate(&cfg).unwrap();
        assert!(sim.cohort.subjects.iter().all(|s| !s.death_observed));
        assert_eq!(sim.cohort.observations.len(), 200 * 10);
        let o = true_estimands(sim.frame.as_ref().unwrap(), 9.0, 5.0).unwrap();
        assert_eq!(o.n_always_survivors, 200);
        assert!((o.contrast - (o.population_mean[1] - o.population_mean[0])).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = simulate(&small(300, 9)).unwrap();
        let b = simulate(&small(300, 9)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&small(300, 10)).unwrap();
        assert_ne!(a.cohort, c.cohort);
        // the realized cohort does not depend on whether counterfactuals are kept
        let d = simulate(&SimConfig { emit_counterfactuals: false, ..small(300, 9) }).unwrap();
        assert_eq!(a.cohort, d.cohort);
    }

    #[test]
    fn one_year_death_rate_is_binomial() {
        let p: f64 = 0.12;
        let cfg = SimConfig {
            n_subjects: 10_000,
            seed: 2024,
            horizon: 1,
            groups: [GroupParams { intercept_mean: 50.0, intercept_sd: 0.0, slope_mean: 0.0, slope_sd: 0.0, quadratic_coef: 0.0 }; 2],
            residual_sd: 0.0,
            hazard_intercept: (p / (1.0 - p)).ln(),
            hazard_response_coef: 0.0,
            hazard_age_coef: 0.0,
            response_age_coef: 0.0,
            nonresponse_prob: 0.0,
            ..Default::default()
        };
        let sim = simulate(&cfg).unwrap();
        let deaths = sim.cohort.subjects.iter().filter(|s| s.death_observed).count() as f64;
        let n = 10_000.0;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((deaths / n - p).abs() < 3.0 * se, "{} vs {p}", deaths / n);
    }

    #[test]
    fn realized_arm_matches_cohort() {
        let cfg = SimConfig {
            residual_sd: 0.0,
            nonresponse_prob: 0.0,
            response_bounds: None,
            ..small(400, 5)
        };
        let sim = simulate(&cfg).unwrap();
        let frame = sim.frame.unwrap();
        for (tr, po) in sim.cohort.trajectories().iter().zip(&frame.subjects) {
            let z = po.realized as usize;
            assert_eq!(tr.subject.group, po.realized);
            assert_eq!(tr.subject.survival_time, po.survival[z]);
            for o in &tr.observations {
                assert_eq!(o.value.unwrap().to_bits(), po.latent[z][o.time as usize].to_bits());
            }
            let n_visits = po.survival[z].map_or(10, |s| s.ceil() as usize);
            assert_eq!(tr.observations.len(), n_visits);
        }
    }

    #[test]
    fn hand_built_frame() {
        let subj = |id: &str, s0: Option<f64>, s1: Option<f64>, y0: f64, y1: f64| SubjectOutcomes {
            id: id.into(),
            baseline_age: 70.0,
            realized: 0,
            survival: [s0, s1],
            dead_by_horizon: [s0.is_some(), s1.is_some()],
            latent: [vec![0.0, y0], vec![0.0, y1]],
        };
        let frame = PotentialOutcomeFrame {
            horizon: 1,
            subjects: vec![
                subj("a", None, None, 80.0, 70.0),
                subj("b", None, Some(0.5), 60.0, 50.0),
                subj("c", Some(0.5), None, 40.0, 90.0),
                subj("d", None, None, 90.0, 86.0),
            ],
        };
        let o = true_estimands(&frame, 1.0, 1.0).unwrap();
        // always survivors: a and d
        assert_eq!(o.n_always_survivors, 2);
        assert_eq!(o.always_survivor_mean, [85.0, 78.0]);
        assert_eq!(o.contrast, -7.0);
        // survivors under arm 0: a, b, d; under arm 1: a, c, d
        assert!((o.survivor_mean[0] - 230.0 / 3.0).abs() < 1e-12);
        assert!((o.survivor_mean[1] - 246.0 / 3.0).abs() < 1e-12);
        assert_eq!(o.population_mean, [67.5, 74.0]);
    }

    #[test]
    fn independent_hazard_oracle_matches_survivors() {
        // hazard ignores response and group: always-survivor means equal arm
        // survivor means up to sampling noise
        let cfg = SimConfig {
            hazard_response_coef: 0.0,
            hazard_age_coef: 0.0,
            hazard_intercept: -2.5,
            ..small(4000, 17)
        };
        let sim = simulate(&cfg).unwrap();
        let o = true_estimands(sim.frame.as_ref().unwrap(), 9.0, 5.0).unwrap();
        for z in 0..2 {
            let se = o.always_survivor_sd[z] / (o.n_always_survivors as f64).sqrt();
            assert!((o.always_survivor_mean[z] - o.survivor_mean[z]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn config_validation() {
        assert!(simulate(&SimConfig { p_group: 1.5, ..Default::default() }).is_err());
        assert!(simulate(&SimConfig { residual_sd: -1.0, ..Default::default() }).is_err());
        assert!(simulate(&SimConfig { horizon: 0, ..Default::default() }).is_err());
        let json = serde_json::to_string(&SimConfig::default()).unwrap();
        let back: SimConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, SimConfig::default());
        assert!(serde_json::from_str::<SimConfig>(&json.replace("\"seed\"", "\"sead\"")).is_err());
    }

    #[test]
    fn counterfactual_csv_layout() {
        let sim = simulate(&small(3, 1)).unwrap();
        let mut buf = Vec::new();
        sim.frame.unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "subject_id,arm,survival_time,d_horizon,y_t0,y_t1,y_t2,y_t3,y_t4,y_t5,y_t6,y_t7,y_t8,y_t9");
        assert_eq!(lines.count(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn output_always_validates(seed in 0u64..10_000, nr in 0.0f64..0.5, h0 in -4.0f64..4.0) {
            let cfg = SimConfig { seed, nonresponse_prob: nr, hazard_intercept: h0, ..small(150, seed) };
            let sim = simulate(&cfg).unwrap();
            prop_assert!(validate(&sim.cohort).is_empty());
            let frame = sim.frame.unwrap();
            for s in &frame.subjects {
                for z in 0..2 {
                    prop_assert_eq!(s.dead_by_horizon[z], s.survival[z].is_some_and(|t| t <= 9.0));
                }
            }
        }

        #[test]
        fn lower_hazard_never_shortens_survival(seed in 0u64..10_000, h0 in -3.0f64..3.0, drop in 0.0f64..3.0) {
            let hi = simulate(&SimConfig { hazard_intercept: h0, ..small(100, seed) }).unwrap();
            let lo = simulate(&SimConfig { hazard_intercept: h0 - drop, ..small(100, seed) }).unwrap();
            for (a, b) in hi.frame.unwrap().subjects.iter().zip(&lo.frame.unwrap().subjects) {
                for z in 0..2 {
                    let ta = a.survival[z].unwrap_or(f64::INFINITY);
                    let tb = b.survival[z].unwrap_or(f64::INFINITY);
                    prop_assert!(tb >= ta);
                }
            }
        }
    }
}
