use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "truncdeath", version, about = "Longitudinal outcomes truncated by death")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort from a JSON simulator configuration.
    Simulate(SimulateArgs),
    /// Check a cohort against the data-model invariants.
    Validate(ValidateArgs),
    /// Fill intermittent missing responses within survival-time strata.
    Impute(ImputeArgs),
    /// Run one estimand engine, or all of them.
    Fit(FitArgs),
    /// Proportion alive and healthy over time.
    Pah(PahArgs),
    /// Combine saved reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TimeTerms {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Effects {
    None,
    InterceptSlope,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// Subjects CSV.
    #[arg(long)]
    pub subjects: PathBuf,
    /// Observations CSV.
    #[arg(long)]
    pub obs: PathBuf,
    /// Valid response range as `lo,hi`.
    #[arg(long, value_parser = parse_bounds)]
    pub bounds: Option<(f64, f64)>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulator configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Writes `<prefix>_subjects.csv`, `<prefix>_observations.csv` and, when
    /// counterfactuals are enabled, `<prefix>_counterfactuals.csv`.
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Also write the violations as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Survival-time stratum boundaries in years, e.g. `2,5`.
    #[arg(long, value_delimiter = ',')]
    pub boundaries: Vec<f64>,
    /// Add residual noise to conditional means.
    #[arg(long)]
    pub noise: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Writes `<prefix>_subjects.csv`, `<prefix>_observations.csv` and `<prefix>_imputation.json`.
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Engine name, or `all`.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Also write fitted trajectories as CSV.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Survival-time stratum boundaries for the pattern-mixture engine.
    #[arg(long, value_delimiter = ',')]
    pub boundaries: Vec<f64>,
    /// Follow-up time at which means are reported.
    #[arg(long, default_value_t = 5.0)]
    pub horizon: f64,
    /// Visit time of the response in the survivor-stratum contrast; defaults to the horizon.
    #[arg(long)]
    pub response_time: Option<f64>,
    /// Healthy threshold for the alive-and-healthy engine.
    #[arg(long, default_value_t = 80.0)]
    pub threshold: f64,
    /// Tolerance for matching observations to nominal times.
    #[arg(long, default_value_t = 0.0)]
    pub matching_window: f64,
    /// Baseline age for fitted trajectories.
    #[arg(long, default_value_t = 70.0)]
    pub reference_age: f64,
    /// Covariates of the survival model in the survivor-stratum contrast.
    #[arg(long, value_delimiter = ',', default_value = "baseline_age")]
    pub confounders: Vec<String>,
    /// Years before death at which terminal-decline means are reported.
    #[arg(long, value_delimiter = ',', default_value = "1,2,6")]
    pub years_before_death: Vec<f64>,
    #[arg(long, value_enum, default_value_t = TimeTerms::Linear)]
    pub time_terms: TimeTerms,
    /// Random effects for the mixed-model engines.
    #[arg(long, value_enum, default_value_t = Effects::InterceptSlope)]
    pub random_effects: Effects,
}

#[derive(Debug, Args)]
pub struct PahArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    #[arg(long, default_value_t = 80.0)]
    pub threshold: f64,
    /// Evaluation times in years, e.g. `0,1,2,3,4,5`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub times: Vec<f64>,
    #[arg(long)]
    pub by_group: bool,
    #[arg(long, default_value_t = 0.0)]
    pub matching_window: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files written by `fit`.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

fn parse_bounds(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err("bounds must be finite with lo < hi".into());
    }
    Ok((lo, hi))
}
