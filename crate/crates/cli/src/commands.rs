use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use truncdeath_core::estimators::Regressor;
use truncdeath_core::imputation::impute_single;
use truncdeath_core::io::{self, read_cohort, to_json_string, write_cohort, write_json};
use truncdeath_core::numerics::LogisticOptions;
use truncdeath_core::{
    joint_pah, naive_extrapolation_summary, pattern_mixture_fit, principal_strat_estimate, rca_fit, simulate as run_simulation,
    terminal_decline_fit, unconditional_fit, validate as check, Bounds, Cohort, EstimandReport, FitOptions, ModelKind,
    ModelSpec, PahOptions, PrincipalOptions, RandomEffects, SimConfig, TimeScale,
};

use crate::args::{CohortArgs, Effects, FitArgs, Format, ImputeArgs, PahArgs, SimulateArgs, TimeTerms, ValidateArgs};
use crate::compare::{write_rows_csv, Row};
use crate::{Failure, Outcome};

fn prefixed(prefix: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}_{suffix}"))
}

/// Loads a cohort and refuses to continue if it breaks any invariant.
fn load(args: &CohortArgs) -> Result<Cohort, Failure> {
    let bounds = args.bounds.map(|(lo, hi)| Bounds::new(lo, hi));
    let cohort = read_cohort(&args.subjects, &args.obs, bounds)?;
    let violations = check(&cohort);
    if let Some(first) = violations.first() {
        return Err(Failure::Data(format!(
            "cohort has {} violation(s); first: {first} (run `validate` for the full list)",
            violations.len()
        )));
    }
    Ok(cohort)
}

pub fn simulate(args: &SimulateArgs) -> Outcome {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Data(format!("{}: {e}", args.config.display())))?;
    let cfg: SimConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", args.config.display())))?;
    let sim = run_simulation(&cfg)?;
    let subjects = prefixed(&args.out_prefix, "subjects.csv");
    let observations = prefixed(&args.out_prefix, "observations.csv");
    write_cohort(&sim.cohort, &subjects, &observations)?;
    let deaths = sim.cohort.subjects.iter().filter(|s| s.death_observed).count();
    let mut written = vec![subjects, observations];
    if let Some(frame) = &sim.frame {
        let path = prefixed(&args.out_prefix, "counterfactuals.csv");
        frame.write_csv(BufWriter::new(File::create(&path)?))?;
        written.push(path);
    }
    println!(
        "simulated {} subjects ({deaths} deaths, {} observations, {} missing) -> {}",
        sim.cohort.subjects.len(),
        sim.cohort.observations.len(),
        sim.cohort.missing_count(),
        join_paths(&written)
    );
    Ok(())
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

pub fn validate(args: &ValidateArgs) -> Outcome {
    let c = &args.cohort;
    let cohort = read_cohort(&c.subjects, &c.obs, c.bounds.map(|(lo, hi)| Bounds::new(lo, hi)))?;
    let violations = check(&cohort);
    if let Some(out) = &args.out {
        write_json(out, &violations)?;
    }
    for v in &violations {
        eprintln!("{v}");
    }
    println!(
        "{} subjects, {} observations: {} violations",
        cohort.subjects.len(),
        cohort.observations.len(),
        violations.len()
    );
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{} violations", violations.len())))
    }
}

pub fn impute(args: &ImputeArgs) -> Outcome {
    let cohort = load(&args.cohort)?;
    let (done, report) = impute_single(&cohort, &args.boundaries, args.noise, args.seed)?;
    let subjects = prefixed(&args.out_prefix, "subjects.csv");
    let observations = prefixed(&args.out_prefix, "observations.csv");
    let summary = prefixed(&args.out_prefix, "imputation.json");
    write_cohort(&done, &subjects, &observations)?;
    write_json(&summary, &report)?;
    let skipped = report.cells.iter().filter(|c| c.skipped.is_some()).count();
    println!(
        "imputed {} of {} missing values ({} clamped, {} cell(s) with skips) -> {}",
        report.total_imputed,
        report.total_missing,
        report.total_clamped,
        skipped,
        join_paths(&[subjects, observations, summary])
    );
    Ok(())
}

fn model_spec(args: &FitArgs, effects: RandomEffects, scale: TimeScale) -> ModelSpec {
    match args.time_terms {
        TimeTerms::Quadratic => ModelSpec::quadratic(effects, scale),
        TimeTerms::Linear => ModelSpec {
            fixed: vec![Regressor::Intercept, Regressor::Group, Regressor::BaselineAge, Regressor::Time, Regressor::GroupTime],
            random_effects: effects,
            time_scale: scale,
        },
    }
}

fn run_engine(kind: ModelKind, cohort: &Cohort, args: &FitArgs) -> truncdeath_core::Result<EstimandReport> {
    let effects = match args.random_effects {
        Effects::None => RandomEffects::None,
        Effects::InterceptSlope => RandomEffects::InterceptSlope,
    };
    let opts = FitOptions {
        horizons: vec![args.horizon],
        reference_age: args.reference_age,
        matching_window: args.matching_window,
        years_before_death: args.years_before_death.clone(),
        ..FitOptions::default()
    };
    match kind {
        ModelKind::Unconditional => unconditional_fit(cohort, &model_spec(args, effects, TimeScale::FromBaseline), &opts),
        ModelKind::NaiveExtrapolation => naive_extrapolation_summary(cohort, args.horizon, args.matching_window),
        ModelKind::PatternMixture => {
            pattern_mixture_fit(cohort, &args.boundaries, &model_spec(args, effects, TimeScale::FromBaseline), &opts)
        }
        ModelKind::PrincipalStrat => {
            let popts = PrincipalOptions {
                horizon: args.horizon,
                confounders: args.confounders.clone(),
                response_time: args.response_time.unwrap_or(args.horizon),
                matching_window: args.matching_window,
                logistic: LogisticOptions::default(),
            };
            principal_strat_estimate(cohort, &popts)
        }
        ModelKind::TerminalDecline => terminal_decline_fit(cohort, &model_spec(args, effects, TimeScale::FromDeath), &opts),
        ModelKind::Rca => rca_fit(cohort, &model_spec(args, RandomEffects::None, TimeScale::FromBaseline), &opts),
        ModelKind::JointPah => {
            let times = pah_grid(args.horizon);
            let popts = PahOptions {
                healthy_threshold: args.threshold,
                times,
                by_group: false,
                matching_window: args.matching_window,
            };
            Ok(joint_pah(cohort, &popts)?.to_report(cohort))
        }
    }
}

/// Whole years from 0 to the horizon, plus the horizon itself if fractional.
fn pah_grid(horizon: f64) -> Vec<f64> {
    let mut times: Vec<f64> = (0..=horizon.max(0.0).floor() as u32).map(f64::from).collect();
    if horizon > 0.0 && horizon.fract() != 0.0 {
        times.push(horizon);
    }
    times
}

pub fn fit(args: &FitArgs) -> Outcome {
    let cohort = load(&args.cohort)?;
    let kinds: Vec<ModelKind> = if args.model == "all" {
        ModelKind::ALL.to_vec()
    } else {
        vec![args.model.parse::<ModelKind>().map_err(|e| Failure::Data(e.to_string()))?]
    };

    let mut reports = Vec::new();
    let mut failures: Vec<(ModelKind, truncdeath_core::Error)> = Vec::new();
    for kind in &kinds {
        match run_engine(*kind, &cohort, args) {
            Ok(r) => reports.push(r),
            Err(e) => failures.push((*kind, e)),
        }
    }
    if kinds.len() == 1 {
        if let Some((_, e)) = failures.pop() {
            return Err(e.into());
        }
    }
    for (kind, e) in &failures {
        eprintln!("warning: {kind} failed: {e}");
    }
    if reports.is_empty() {
        let numerical = failures.iter().all(|(_, e)| e.is_numerical());
        let msg = "every engine failed".to_string();
        return Err(if numerical { Failure::Numerical(msg) } else { Failure::Data(msg) });
    }

    match args.format {
        Format::Json if kinds.len() == 1 => std::fs::write(&args.out, to_json_string(&reports[0])?)?,
        Format::Json => std::fs::write(&args.out, to_json_string(&reports)?)?,
        Format::Csv => {
            let source = args.out.display().to_string();
            let rows: Vec<Row> = reports.iter().flat_map(|r| Row::from_report(r, &source)).collect();
            write_rows_csv(&args.out, &rows)?;
        }
    }
    if let Some(path) = &args.trajectories {
        write_trajectories(path, &reports)?;
    }
    for r in &reports {
        for note in &r.notes {
            eprintln!("note ({}): {note}", r.model_kind);
        }
    }
    let names: Vec<&str> = reports.iter().map(|r| r.model_kind.as_str()).collect();
    let n: usize = reports.iter().map(|r| r.estimates.len() + r.strata.iter().map(|s| s.estimates.len()).sum::<usize>()).sum();
    println!("fit {}: {n} estimates -> {}", names.join(", "), args.out.display());
    Ok(())
}

fn write_trajectories(path: &Path, reports: &[EstimandReport]) -> Outcome {
    if let [only] = reports {
        only.write_trajectories_csv(BufWriter::new(File::create(path)?))?;
        return Ok(());
    }
    // Several engines: prefix each block's rows with the engine name.
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["model_kind", "group", "stratum", "time", "value"])?;
    for r in reports {
        let mut buf = Vec::new();
        r.write_trajectories_csv(&mut buf)?;
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        for rec in rd.records() {
            let rec = rec?;
            let mut row = vec![r.model_kind.as_str().to_string()];
            row.extend(rec.iter().map(str::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn pah(args: &PahArgs) -> Outcome {
    let cohort = load(&args.cohort)?;
    let opts = PahOptions {
        healthy_threshold: args.threshold,
        times: args.times.clone(),
        by_group: args.by_group,
        matching_window: args.matching_window,
    };
    let report = joint_pah(&cohort, &opts)?;
    match args.format {
        Format::Json => write_json(&args.out, &report)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&args.out)?));
            w.write_record(["group", "time", "n_alive", "n_alive_healthy", "n_missing", "pah", "survival"])?;
            for c in &report.curves {
                let g = c.group.map(|g| g.to_string()).unwrap_or_default();
                for p in &c.points {
                    w.write_record([
                        g.clone(),
                        io::fmt_f64(p.time),
                        p.n_alive.to_string(),
                        p.n_alive_healthy.to_string(),
                        p.n_missing.to_string(),
                        io::fmt_f64(p.pah),
                        io::fmt_f64(p.survival),
                    ])?;
                }
            }
            w.flush()?;
        }
    }
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    for c in &report.curves {
        let who = c.group.map(|g| format!("group {g}")).unwrap_or_else(|| "cohort".into());
        println!(
            "{who}: years of healthy life {}, decline {} per year",
            io::fmt_f64(c.years_healthy_life),
            io::fmt_f64(c.decline_rate)
        );
    }
    Ok(())
}
