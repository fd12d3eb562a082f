//! Analysis of longitudinal outcomes truncated by death.
//!
//! Provides the cohort data model, a small dense numerical kernel, six
//! estimand engines (unconditional, pattern-mixture, principal
//! stratification, terminal decline, partly conditional and joint
//! alive-and-healthy), single imputation of intermittent nonresponse, and a
//! cohort simulator with counterfactual outcomes.

pub mod cohort;
pub mod error;
pub mod estimators;
pub mod imputation;
pub mod io;
pub mod numerics;
pub mod simulator;

pub use cohort::{
    assign_strata, hypothetical_cohort, survivors_at, validate, years_from_death_view, Bounds, Cohort, DeathStratum, Observation, Rule,
    Subject, SubjectId, Violation,
};
pub use error::{Error, Result};
pub use estimators::{
    joint_pah, naive_extrapolation_summary, pattern_mixture_fit, principal_strat_estimate, rca_fit,
    terminal_decline_fit, unconditional_fit, EstimandReport, FitOptions, ModelKind, ModelSpec, PahOptions,
    PrincipalOptions, RandomEffects, TimeScale, Variant,
};
pub use imputation::{em_mvn, impute_single, EmOptions, ImputationReport, MvnModel};
pub use simulator::{simulate, true_estimands, PotentialOutcomeFrame, SimConfig, Simulation};
