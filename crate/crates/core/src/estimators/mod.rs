//! Estimand engines. Each maps a cohort to a report whose estimates carry
//! the conditioning set they describe.

mod naive;
mod pah;
mod principal;
mod regression;
mod report;
mod spec;

pub use naive::naive_extrapolation_summary;
pub use pah::{joint_pah, PahCurve, PahOptions, PahPoint, PahReport};
pub use principal::{
    principal_strat_components, principal_strat_estimate, vital_status, weighted_mean, weighted_mean_se, ArmSample,
    PrincipalComponents, PrincipalOptions, SurvivalModel, VitalStatus,
};
pub use regression::{pattern_mixture_fit, rca_fit, terminal_decline_fit, unconditional_fit};
pub use report::{
    se_key, Estimate, EstimandReport, FittedTrajectory, ModelKind, StratumReport, TrajectoryPoint, Unit, Variant,
};
pub use spec::{FitOptions, ModelSpec, RandomEffects, Regressor, TimeScale};
