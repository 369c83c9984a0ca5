use std::path::Path;
use std::process::{Command, Output};

fn quarantine(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quarantine"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fitted_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(quarantine(d, &["synth", "--seed", "3"]).status.success());
    let out = quarantine(d, &["fit", "--records", "records.csv", "--population", "population.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(quarantine(dir.path(), &["no-such-command"]).status.code(), Some(64));
    assert_eq!(quarantine(dir.path(), &["fit"]).status.code(), Some(64));
    assert_eq!(quarantine(dir.path(), &["simulate", "--reps", "many"]).status.code(), Some(64));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = quarantine(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("EXIT CODES"));
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = quarantine(dir.path(), &["fit", "--records", "absent.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("absent.csv"));
}

#[test]
fn malformed_row_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "age,risk_level,infected,z\n40,,1,3\n41,,1,three\n").unwrap();
    let out = quarantine(dir.path(), &["fit", "--records", "bad.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn epsilon_outside_unit_interval_is_rejected() {
    let dir = fitted_dir();
    let out = quarantine(dir.path(), &["solve", "--fit-dir", ".", "--epsilon", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epsilon"));
}

#[test]
fn fit_writes_report_and_densities() {
    let dir = fitted_dir();
    for name in ["fit_report.json", "f1_density.csv", "f0_density.csv", "infected.csv", "interval_fit.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit_report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert_eq!(report["n_observations"], 1770);
}

#[test]
fn solve_writes_three_rules_over_the_support() {
    let dir = fitted_dir();
    let out = quarantine(dir.path(), &["solve", "--fit-dir", "."]);
    assert!(out.status.success(), "{}", stderr(&out));
    for label in ["quantile", "conditional_quantile", "optimal"] {
        let text = std::fs::read_to_string(dir.path().join(format!("rule_{label}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 1 + 70, "{label}");
    }
    let eval = std::fs::read_to_string(dir.path().join("evaluation.csv")).unwrap();
    assert!(eval.starts_with("method,aqd,ep,n_infected,rounded"));
    let solution: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("solution.json")).unwrap()).unwrap();
    assert!(solution["solution"]["c0"].as_f64().unwrap() <= solution["solution"]["c_star"].as_f64().unwrap());
}

#[test]
fn weights_file_must_cover_the_support() {
    let dir = fitted_dir();
    std::fs::write(dir.path().join("w.csv"), "risk_level,age,weight\nnone,40,2.0\n").unwrap();
    let out = quarantine(dir.path(), &["solve", "--fit-dir", ".", "--weights", "w.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn heavier_cost_weight_shortens_quarantine_there() {
    let dir = fitted_dir();
    let mut weights = String::from("risk_level,age,weight\n");
    for age in 11..=80 {
        let w = if age >= 60 { 5.0 } else { 1.0 };
        weights.push_str(&format!("none,{age},{w}\n"));
    }
    std::fs::write(dir.path().join("w.csv"), weights).unwrap();
    let read_rule = |name: &str| -> Vec<f64> {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect()
    };
    assert!(quarantine(dir.path(), &["solve", "--fit-dir", "."]).status.success());
    let plain = read_rule("rule_optimal.csv");
    let out = quarantine(dir.path(), &["solve", "--fit-dir", ".", "--weights", "w.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let weighted = read_rule("rule_optimal.csv");
    // Age 70 sits at index 59 of 11..=80.
    assert!(weighted[59] < plain[59], "{} vs {}", weighted[59], plain[59]);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = fitted_dir();
    std::fs::write(dir.path().join("config.json"), r#"{"epsilon": 0.1, "y_max": 40}"#).unwrap();
    let epsilon = |args: &[&str]| -> f64 {
        assert!(quarantine(dir.path(), args).status.success());
        let s: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("solution.json")).unwrap()).unwrap();
        s["epsilon"].as_f64().unwrap()
    };
    assert_eq!(epsilon(&["solve", "--fit-dir", ".", "--config", "config.json"]), 0.1);
    assert_eq!(epsilon(&["solve", "--fit-dir", ".", "--config", "config.json", "--epsilon", "0.02"]), 0.02);

    std::fs::write(dir.path().join("typo.json"), r#"{"epsilom": 0.1}"#).unwrap();
    assert_eq!(quarantine(dir.path(), &["solve", "--fit-dir", ".", "--config", "typo.json"]).status.code(), Some(1));
}

#[test]
fn export_curve_writes_requested_grid() {
    let dir = fitted_dir();
    let out = quarantine(dir.path(), &["export-curve", "--fit-dir", ".", "--age", "30", "--points", "50"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("ratio_curve_none_30.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "y,ratio");
    assert_eq!(rows.len(), 51);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(1).unwrap().parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn evaluate_labels_rules_from_file_names() {
    let dir = fitted_dir();
    assert!(quarantine(dir.path(), &["solve", "--fit-dir", "."]).status.success());
    let out = quarantine(
        dir.path(),
        &["evaluate", "--rule", "rule_optimal.csv", "--rule", "short=rule_quantile.csv", "--records", "records.csv", "--population", "population.csv"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("evaluation.csv")).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["optimal", "short"]);
}

#[test]
fn evaluate_needs_uninfected_law() {
    let dir = fitted_dir();
    assert!(quarantine(dir.path(), &["solve", "--fit-dir", "."]).status.success());
    let out = quarantine(dir.path(), &["evaluate", "--rule", "rule_optimal.csv", "--records", "records.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn risk_level_imputation_writes_level_rules() {
    let dir = fitted_dir();
    let d = dir.path();
    assert!(quarantine(d, &["synth", "--kind", "risk", "--n", "600"]).status.success());
    let out = quarantine(
        d,
        &[
            "solve", "--fit-dir", ".", "--impute-records", "records.csv", "--population", "population.csv", "--cases",
            "cases.csv", "--imputations", "2",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(d.join("rule_optimal.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 70);
    for level in ["high", "medium", "low"] {
        assert!(text.lines().any(|l| l.starts_with(level)));
    }
}

#[test]
fn simulate_writes_table_and_durations() {
    let dir = tempfile::tempdir().unwrap();
    let out = quarantine(dir.path(), &["simulate", "--scenario", "2", "--n", "3000", "--reps", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("scenario2_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    let durations = std::fs::read_to_string(dir.path().join("scenario2_durations.csv")).unwrap();
    assert!(durations.starts_with("age,quantile,conditional_quantile,optimal,theoretical_optimal"));
    assert_eq!(durations.lines().count(), 1 + 71);
}

#[test]
fn misspecified_mixture_scenario_has_no_truth_column() {
    let dir = tempfile::tempdir().unwrap();
    let out = quarantine(dir.path(), &["simulate", "--scenario", "4", "--n", "3000", "--reps", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let durations = std::fs::read_to_string(dir.path().join("scenario4_durations.csv")).unwrap();
    assert!(durations.starts_with("age,quantile,conditional_quantile,optimal\n"));
}

#[test]
fn unknown_scenario_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(quarantine(dir.path(), &["simulate", "--scenario", "5", "--reps", "1"]).status.code(), Some(1));
}
