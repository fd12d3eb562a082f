use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_truncdeath"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/hypothetical").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn estimate(report: &Value, variant: &str, name: &str) -> f64 {
    report["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["variant"] == variant && e["name"] == name)
        .unwrap_or_else(|| panic!("{variant}.{name} missing"))["value"]
        .as_f64()
        .unwrap()
}

fn fit_hypothetical(dir: &Path, model: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out = dir.join(format!("{model}.json"));
    let subjects = data("subjects.csv");
    let obs = data("observations.csv");
    let mut args = vec!["fit", "--model", model, "--subjects", p(&subjects), "--obs", p(&obs), "--out", p(&out)];
    args.extend_from_slice(extra);
    (run(&args), out)
}

#[test]
fn validate_well_formed_cohort() {
    let o = run(&["validate", "--subjects", p(&data("subjects.csv")), "--obs", p(&data("observations.csv"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 violations"));
}

#[test]
fn validate_reports_post_death_rows() {
    let dir = TempDir::new().unwrap();
    let obs = dir.path().join("o.csv");
    let mut text = fs::read_to_string(data("observations.csv")).unwrap();
    text.push_str("C,4,70\n");
    fs::write(&obs, text).unwrap();
    let report = dir.path().join("v.json");
    let o = run(&["validate", "--subjects", p(&data("subjects.csv")), "--obs", p(&obs), "--out", p(&report)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("1 violations"));
    assert_eq!(json(&report)[0]["rule"], "post_death_observation");
}

#[test]
fn rca_slope_on_hypothetical_cohort() {
    let dir = TempDir::new().unwrap();
    let (o, out) = fit_hypothetical(dir.path(), "rca", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&out);
    assert_eq!(r["model_kind"], "rca");
    assert!((estimate(&r, "fit", "coef.time") - 11.0 / 12.0).abs() < 1e-9);
    assert!((estimate(&r, "fit", "mean_at_5") - 80.75).abs() < 1e-9);
    assert!(r["conditioning"].as_str().unwrap().contains("alive"));
}

#[test]
fn all_engines_then_comparison_table() {
    let dir = TempDir::new().unwrap();
    let (o, all) = fit_hypothetical(dir.path(), "all", &["--boundaries", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // every subject is in group 0, so the two-arm contrast cannot run
    assert!(stderr(&o).contains("principal_strat failed"));

    let table = dir.path().join("table.json");
    let o = run(&["report", "--input", p(&all), "--out", p(&table)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = json(&table);
    assert!(t["warnings"].as_array().unwrap().is_empty());
    let rows = t["rows"].as_array().unwrap();
    let cell = |kind: &str, stratum: Option<&str>, variant: &str, name: &str| -> f64 {
        rows.iter()
            .find(|r| {
                r["model_kind"] == kind
                    && r["variant"] == variant
                    && r["name"] == name
                    && r["stratum"].as_str() == stratum
            })
            .unwrap_or_else(|| panic!("{kind} {stratum:?} {name} missing"))["value"]
            .as_f64()
            .unwrap()
    };
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    close(cell("naive_extrapolation", None, "summary", "mean_at_5"), 54.5);
    close(cell("naive_extrapolation", None, "summary", "mean_slope"), -5.25);
    close(cell("pattern_mixture", Some("survivor"), "summary", "mean_at_5"), 82.0);
    close(cell("pattern_mixture", Some("survivor"), "summary", "mean_slope"), -1.0);
    close(cell("pattern_mixture", Some("death in [0, 6)"), "summary", "mean_slope"), -9.5);
    close(cell("terminal_decline", None, "summary", "pooled_slope"), -9.5);
    close(cell("rca", None, "fit", "coef.time"), 11.0 / 12.0);
    close(cell("rca", None, "fit", "mean_at_5"), 80.75);
    close(cell("joint_pah", None, "summary", "pah_at_0"), 0.75);
    close(cell("joint_pah", None, "summary", "pah_at_5"), 0.25);
    close(cell("joint_pah", None, "summary", "decline_rate"), 0.1);
    // conditioning labels survive into the table
    assert!(rows.iter().all(|r| !r["conditioning"].as_str().unwrap().is_empty()));
}

#[test]
fn report_of_one_file_passes_rows_through() {
    let dir = TempDir::new().unwrap();
    let (_, out) = fit_hypothetical(dir.path(), "naive_extrapolation", &[]);
    let csv_out = dir.path().join("t.csv");
    let o = run(&["report", "--input", p(&out), "--out", p(&csv_out), "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let n_estimates = json(&out)["estimates"].as_array().unwrap().len();
    let text = fs::read_to_string(&csv_out).unwrap();
    assert_eq!(text.lines().count(), n_estimates + 1);
    assert!(text.starts_with("source,model_kind,stratum,variant,name,value"));
}

#[test]
fn report_warns_on_different_cohorts() {
    let dir = TempDir::new().unwrap();
    let (_, a) = fit_hypothetical(dir.path(), "rca", &[]);
    let subjects = dir.path().join("s.csv");
    let obs = dir.path().join("o.csv");
    fs::write(&subjects, fs::read_to_string(data("subjects.csv")).unwrap().replace("A,70", "A,71")).unwrap();
    fs::copy(data("observations.csv"), &obs).unwrap();
    let b = dir.path().join("b.json");
    let o = run(&["fit", "--model", "rca", "--subjects", p(&subjects), "--obs", p(&obs), "--out", p(&b)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = dir.path().join("t.json");
    let o = run(&["report", "--input", p(&a), p(&b), "--out", p(&table)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
    let t = json(&table);
    assert_eq!(t["warnings"].as_array().unwrap().len(), 1);
    let sources: std::collections::BTreeSet<&str> =
        t["rows"].as_array().unwrap().iter().map(|r| r["source"].as_str().unwrap()).collect();
    assert_eq!(sources.len(), 2);
}

fn write_config(dir: &Path, counterfactuals: bool) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = format!(r#"{{"n_subjects": 150, "seed": 42, "emit_counterfactuals": {counterfactuals}}}"#);
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn simulate_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), true);
    let mut outputs = Vec::new();
    for run_id in ["a", "b"] {
        let prefix = dir.path().join(run_id);
        let o = run(&["simulate", "--config", p(&cfg), "--out-prefix", p(&prefix)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let files: Vec<Vec<u8>> = ["subjects.csv", "observations.csv", "counterfactuals.csv"]
            .iter()
            .map(|s| fs::read(format!("{}_{s}", prefix.display())).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    let header = String::from_utf8(outputs[0][2].clone()).unwrap();
    assert!(header.starts_with("subject_id,arm,survival_time,d_horizon,y_t0,"));

    let prefix = dir.path().join("a");
    let o = run(&[
        "validate",
        "--subjects",
        &format!("{}_subjects.csv", prefix.display()),
        "--obs",
        &format!("{}_observations.csv", prefix.display()),
        "--bounds",
        "0,100",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn simulate_rejects_unknown_config_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"n_subjects": 10, "hazard": 1}"#).unwrap();
    let o = run(&["simulate", "--config", p(&cfg), "--out-prefix", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn impute_keeps_observed_values_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"n_subjects": 200, "seed": 3, "nonresponse_prob": 0.2}"#).unwrap();
    let sim = dir.path().join("sim");
    assert_eq!(run(&["simulate", "--config", p(&cfg), "--out-prefix", p(&sim)]).status.code(), Some(0));
    let subjects = format!("{}_subjects.csv", sim.display());
    let obs = format!("{}_observations.csv", sim.display());
    let mut results = Vec::new();
    for k in ["i1", "i2"] {
        let prefix = dir.path().join(k);
        let o = run(&[
            "impute", "--subjects", &subjects, "--obs", &obs, "--boundaries", "3,6", "--noise", "--seed", "11",
            "--bounds", "0,100", "--out-prefix", p(&prefix),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        results.push(fs::read_to_string(format!("{}_observations.csv", prefix.display())).unwrap());
    }
    assert_eq!(results[0], results[1]);
    let before = fs::read_to_string(&obs).unwrap();
    let mut filled = 0;
    for (a, b) in before.lines().zip(results[0].lines()) {
        let (fa, fb): (Vec<&str>, Vec<&str>) = (a.split(',').collect(), b.split(',').collect());
        assert_eq!(fa[..2], fb[..2]);
        if fa[2].is_empty() {
            filled += usize::from(!fb[2].is_empty());
        } else {
            assert_eq!(fa[2], fb[2]);
        }
    }
    assert!(filled > 0);
    let summary = json(&dir.path().join("i1_imputation.json"));
    assert_eq!(summary["seed"], 11);
}

#[test]
fn pah_csv_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("pah.csv");
    let o = run(&[
        "pah", "--subjects", p(&data("subjects.csv")), "--obs", p(&data("observations.csv")), "--times", "0,5",
        "--out", p(&out), "--format", "csv",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "group,time,n_alive,n_alive_healthy,n_missing,pah,survival");
    assert_eq!(lines[1], ",0,4,3,0,0.75,1");
    assert_eq!(lines[2], ",5,2,1,0,0.25,0.5");
    assert!(stdout(&o).contains("decline 0.1 per year"));
}

#[test]
fn unknown_flag_exits_1() {
    let o = run(&["fit", "--model", "rca", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_model_exits_1() {
    let dir = TempDir::new().unwrap();
    let (o, _) = fit_hypothetical(dir.path(), "gee", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown model kind"));
}

#[test]
fn malformed_row_reports_line_number() {
    let dir = TempDir::new().unwrap();
    let obs = dir.path().join("o.csv");
    let text = fs::read_to_string(data("observations.csv")).unwrap().replacen("A,1,90", "A,one,90", 1);
    fs::write(&obs, text).unwrap();
    let o = run(&["validate", "--subjects", p(&data("subjects.csv")), "--obs", p(&obs)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn missing_file_exits_1() {
    let o = run(&["validate", "--subjects", "/nonexistent/s.csv", "--obs", "/nonexistent/o.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn separation_exits_2() {
    // Within each group the youngest three survive and the oldest three die.
    let dir = TempDir::new().unwrap();
    let mut s = String::from("subject_id,baseline_age,group,survival_time,death_observed\n");
    let mut o = String::from("subject_id,time,value\n");
    for g in 0..2 {
        for i in 0..6 {
            let id = format!("g{g}s{i}");
            if i < 3 {
                s.push_str(&format!("{id},{},{g},,0\n", 65 + i));
                o.push_str(&format!("{id},0,80\n{id},2,{}\n", 75 + i));
            } else {
                s.push_str(&format!("{id},{},{g},1.5,1\n", 65 + i));
                o.push_str(&format!("{id},0,70\n"));
            }
        }
    }
    let subjects = dir.path().join("s.csv");
    let obs = dir.path().join("o.csv");
    fs::write(&subjects, s).unwrap();
    fs::write(&obs, o).unwrap();
    let out = dir.path().join("r.json");
    let o = run(&[
        "fit", "--model", "principal_strat", "--subjects", p(&subjects), "--obs", p(&obs), "--horizon", "2", "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("separation"));
}

#[test]
fn trajectories_csv_for_one_engine() {
    let dir = TempDir::new().unwrap();
    let traj = dir.path().join("traj.csv");
    let (o, _) = fit_hypothetical(dir.path(), "rca", &["--trajectories", p(&traj)]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&traj).unwrap();
    assert!(text.starts_with("group,stratum,time,value\n"));
    assert!(text.lines().count() > 2);
}
