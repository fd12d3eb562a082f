//! CSV and JSON serialization.
//!
//! Subjects file columns: `subject_id,baseline_age,group,survival_time,death_observed`,
//! optionally followed by extra numeric covariate columns. Observations file
//! columns: `subject_id,time,value`. Empty cells mean "absent".

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cohort::{Bounds, Cohort, Observation, Subject, SubjectId};
use crate::{Error, Result};

pub const SUBJECT_COLUMNS: [&str; 5] = ["subject_id", "baseline_age", "group", "survival_time", "death_observed"];
pub const OBSERVATION_COLUMNS: [&str; 3] = ["subject_id", "time", "value"];

fn parse_err(path: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn csv_err(path: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn number(path: &str, line: u64, column: &str, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("column '{column}': '{cell}' is not a number")))
}

fn optional_number(path: &str, line: u64, column: &str, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        Ok(None)
    } else {
        number(path, line, column, cell).map(Some)
    }
}

/// Parses a subjects table. `path` is only used in error messages.
pub fn parse_subjects<R: Read>(input: R, path: &str) -> Result<Vec<Subject>> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < SUBJECT_COLUMNS.len() || names[..SUBJECT_COLUMNS.len()] != SUBJECT_COLUMNS {
        return Err(parse_err(
            path,
            1,
            format!("expected header starting with '{}', found '{}'", SUBJECT_COLUMNS.join(","), names.join(",")),
        ));
    }
    let extras: Vec<String> = names[SUBJECT_COLUMNS.len()..].iter().map(|s| s.to_string()).collect();

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        let id = &rec[0];
        if id.is_empty() {
            return Err(parse_err(path, line, "empty subject_id"));
        }
        let baseline_age = number(path, line, "baseline_age", &rec[1])?;
        let group = rec[2]
            .parse::<u8>()
            .map_err(|_| parse_err(path, line, format!("column 'group': '{}' is not 0 or 1", &rec[2])))?;
        let survival_time = optional_number(path, line, "survival_time", &rec[3])?;
        let death_observed = match &rec[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(
                    path,
                    line,
                    format!("column 'death_observed': '{other}' is not 0 or 1"),
                ))
            }
        };
        let mut extra_covariates = Vec::with_capacity(extras.len());
        for (k, name) in extras.iter().enumerate() {
            let cell = &rec[SUBJECT_COLUMNS.len() + k];
            extra_covariates.push((name.clone(), number(path, line, name, cell)?));
        }
        out.push(Subject {
            id: SubjectId::from(id),
            baseline_age,
            group,
            survival_time,
            death_observed,
            extra_covariates,
        });
    }
    Ok(out)
}

/// Parses an observations table.
pub fn parse_observations<R: Read>(input: R, path: &str) -> Result<Vec<Observation>> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != OBSERVATION_COLUMNS {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}', found '{}'", OBSERVATION_COLUMNS.join(","), names.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        if rec[0].is_empty() {
            return Err(parse_err(path, line, "empty subject_id"));
        }
        out.push(Observation {
            subject_id: SubjectId::from(&rec[0]),
            time: number(path, line, "time", &rec[1])?,
            value: optional_number(path, line, "value", &rec[2])?,
        });
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Loads a cohort from its two CSV files.
pub fn read_cohort(subjects: &Path, observations: &Path, bounds: Option<Bounds>) -> Result<Cohort> {
    let s = parse_subjects(open(subjects)?, &subjects.display().to_string())?;
    let o = parse_observations(open(observations)?, &observations.display().to_string())?;
    Ok(Cohort {
        subjects: s,
        observations: o,
        response_bounds: bounds,
    })
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_subjects<W: Write>(out: W, subjects: &[Subject]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = SUBJECT_COLUMNS.iter().map(|s| s.to_string()).collect();
    if let Some(first) = subjects.first() {
        header.extend(first.extra_covariates.iter().map(|(n, _)| n.clone()));
    }
    w.write_record(&header)?;
    for s in subjects {
        let mut row = vec![
            s.id.to_string(),
            fmt_f64(s.baseline_age),
            s.group.to_string(),
            fmt_opt(s.survival_time),
            if s.death_observed { "1" } else { "0" }.to_string(),
        ];
        row.extend(s.extra_covariates.iter().map(|(_, v)| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_observations<W: Write>(out: W, observations: &[Observation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OBSERVATION_COLUMNS)?;
    for o in observations {
        w.write_record([o.subject_id.to_string(), fmt_f64(o.time), fmt_opt(o.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes both CSV files of a cohort.
pub fn write_cohort(cohort: &Cohort, subjects: &Path, observations: &Path) -> Result<()> {
    write_subjects(File::create(subjects)?, &cohort.subjects)?;
    write_observations(File::create(observations)?, &cohort.observations)?;
    Ok(())
}

/// SHA-256 of the canonical CSV serialization, as lowercase hex.
pub fn fingerprint(cohort: &Cohort) -> String {
    let mut buf = Vec::new();
    // writing to a Vec cannot fail
    write_subjects(&mut buf, &cohort.subjects).expect("in-memory write");
    buf.extend_from_slice(b"\n");
    write_observations(&mut buf, &cohort.observations).expect("in-memory write");
    let digest = Sha256::digest(&buf);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON formatter writing every float with 17 significant digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct PreciseFormatter {
    pretty: bool,
    depth: usize,
    has_value: bool,
}

impl PreciseFormatter {
    pub fn pretty() -> Self {
        PreciseFormatter {
            pretty: true,
            ..Default::default()
        }
    }

    fn indent<W: ?Sized + Write>(&self, w: &mut W) -> io::Result<()> {
        if self.pretty {
            w.write_all(b"\n")?;
            for _ in 0..self.depth {
                w.write_all(b"  ")?;
            }
        }
        Ok(())
    }
}

/// 17 significant digits, positional notation for moderate exponents.
pub fn fmt_f64_17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };
    if (-5..17).contains(&exp) {
        let point = exp + 1;
        let body = if point <= 0 {
            format!("0.{}{}", "0".repeat((-point) as usize), digits)
        } else if point as usize >= digits.len() {
            format!("{}{}.0", digits, "0".repeat(point as usize - digits.len()))
        } else {
            format!("{}.{}", &digits[..point as usize], &digits[point as usize..])
        };
        format!("{sign}{body}")
    } else {
        let (head, tail) = digits.split_at(1);
        if tail.is_empty() {
            format!("{sign}{head}.0e{exp}")
        } else {
            format!("{sign}{head}.{tail}e{exp}")
        }
    }
}

impl serde_json::ser::Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64_17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.depth += 1;
        self.has_value = false;
        w.write_all(b"[")
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.depth -= 1;
        if self.has_value {
            self.indent(w)?;
        }
        w.write_all(b"]")
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        self.indent(w)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, _w: &mut W) -> io::Result<()> {
        self.has_value = true;
        Ok(())
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.depth += 1;
        self.has_value = false;
        w.write_all(b"{")
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.depth -= 1;
        if self.has_value {
            self.indent(w)?;
        }
        w.write_all(b"}")
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        self.indent(w)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(if self.pretty { b": " } else { b":" })
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, _w: &mut W) -> io::Result<()> {
        self.has_value = true;
        Ok(())
    }
}

/// Pretty JSON with 17-significant-digit floats; non-finite floats become `null`.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter::pretty());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}
