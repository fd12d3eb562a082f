//! Side-by-side table of estimates from several reports. Each row keeps the
//! engine and conditioning set it came from; nothing is pooled across engines.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use truncdeath_core::estimators::{se_key, Estimate, Unit};
use truncdeath_core::io::to_json_string;
use truncdeath_core::{EstimandReport, ModelKind, Variant};

use crate::args::{Format, ReportArgs};
use crate::{Failure, Outcome};

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub source: String,
    pub model_kind: ModelKind,
    pub stratum: Option<String>,
    pub variant: Variant,
    pub name: String,
    pub value: f64,
    pub standard_error: Option<f64>,
    pub unit: Unit,
    pub conditioning: String,
    pub cohort_fingerprint: String,
}

impl Row {
    pub fn from_report(r: &EstimandReport, source: &str) -> Vec<Row> {
        let make = |e: &Estimate, stratum: Option<&str>, se: Option<f64>| Row {
            source: source.to_string(),
            model_kind: r.model_kind,
            stratum: stratum.map(str::to_string),
            variant: e.variant,
            name: e.name.clone(),
            value: e.value,
            standard_error: se,
            unit: e.unit,
            conditioning: e.conditioning.clone(),
            cohort_fingerprint: r.cohort_fingerprint.clone(),
        };
        let mut rows: Vec<Row> = r
            .estimates
            .iter()
            .map(|e| make(e, None, r.standard_errors.get(&se_key(e.variant, &e.name)).copied()))
            .collect();
        for s in &r.strata {
            rows.extend(
                s.estimates
                    .iter()
                    .map(|e| make(e, Some(&s.label), s.standard_errors.get(&se_key(e.variant, &e.name)).copied())),
            );
        }
        rows
    }
}

#[derive(Debug, Serialize)]
struct Table<'a> {
    warnings: &'a [String],
    rows: &'a [Row],
}

pub fn write_rows_csv(path: &Path, rows: &[Row]) -> Outcome {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "source", "model_kind", "stratum", "variant", "name", "value", "standard_error", "unit", "conditioning",
            "cohort_fingerprint",
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A file holds either one report or a list of them (`fit --model all`).
fn read_reports(path: &Path) -> Result<Vec<EstimandReport>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    parsed.map_err(|e| Failure::Data(format!("{}: not an estimand report: {e}", path.display())))
}

pub fn report(args: &ReportArgs) -> Outcome {
    let mut rows = Vec::new();
    let mut fingerprints = BTreeSet::new();
    let mut n_reports = 0;
    for path in &args.inputs {
        let source = path.display().to_string();
        for r in read_reports(path)? {
            fingerprints.insert(r.cohort_fingerprint.clone());
            rows.extend(Row::from_report(&r, &source));
            n_reports += 1;
        }
    }
    let mut warnings = Vec::new();
    if fingerprints.len() > 1 {
        warnings.push(format!(
            "reports describe {} different cohorts (fingerprints differ); rows are kept separate",
            fingerprints.len()
        ));
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    match args.format {
        Format::Json => std::fs::write(&args.out, to_json_string(&Table { warnings: &warnings, rows: &rows })?)?,
        Format::Csv => write_rows_csv(&args.out, &rows)?,
    }
    println!("{} rows from {n_reports} report(s) -> {}", rows.len(), args.out.display());
    Ok(())
}
