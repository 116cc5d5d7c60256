use std::path::Path;
use std::process::{Command, Output};

use gaugegeom::io::read_matrix_series_csv;
use gaugegeom::scenario::{template, COMMANDS};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gaugegeom"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn write_scenario(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn template_value(name: &str) -> Value {
    serde_json::from_str(template(name).unwrap()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn every_template_runs_cleanly() {
    for name in COMMANDS {
        let dir = tempfile::tempdir().unwrap();
        let scenario = write_scenario(dir.path(), "scenario.json", &template_value(name));
        let out = run_in(dir.path(), &["run", &scenario]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stderr(&out));
        let record: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(record["command"], *name);
        assert_eq!(record["converged"], true);
        let result = std::fs::read(dir.path().join(format!("{name}.json"))).unwrap();
        let payload: Value = serde_json::from_slice(&result).unwrap();
        assert_eq!(payload, record["payload"]);
    }
}

#[test]
fn validation_errors_exit_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = template_value("hdist");
    v["parameters"]["quadrature_points"] = Value::from(-3);
    let scenario = write_scenario(dir.path(), "bad.json", &v);
    let out = run_in(dir.path(), &["run", &scenario]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("parameters.quadrature_points"),
        "{}",
        stderr(&out)
    );
    assert!(!dir.path().join("hdist.json").exists());
    assert!(!dir.path().join("hdist.csv").exists());
}

#[test]
fn unknown_command_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = template_value("evolve");
    v["command"] = Value::from("warp");
    let scenario = write_scenario(dir.path(), "warp.json", &v);
    let out = run_in(dir.path(), &["run", &scenario]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("warp"));
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = template_value("gauge");
    v["parameters"]["colour"] = Value::from("blue");
    let scenario = write_scenario(dir.path(), "extra.json", &v);
    let out = run_in(dir.path(), &["validate", &scenario]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("colour"), "{}", stderr(&out));
}

#[test]
fn missing_scenario_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["run", "no-such-file.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"").unwrap();
    let mut v = template_value("hdist");
    v["output"] = serde_json::json!({"result": "blocker/inner/hdist.json"});
    let scenario = write_scenario(dir.path(), "s.json", &v);
    let out = run_in(dir.path(), &["run", &scenario]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn unmet_endpoint_tolerance_exits_1_with_result() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = template_value("dyndist");
    v["parameters"]["optimizer"]["endpoint_tol"] = Value::from(1e-30);
    v["parameters"]["optimizer"]["restarts"] = Value::from(1);
    let scenario = write_scenario(dir.path(), "s.json", &v);
    let out = run_in(dir.path(), &["run", "--quiet", &scenario]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let payload: Value = serde_json::from_slice(&std::fs::read(dir.path().join("dyndist.json")).unwrap()).unwrap();
    assert_eq!(payload["converged"], false);
}

#[test]
fn validate_and_templates_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", &template_value("twin"));
    let out = run_in(dir.path(), &["validate", &scenario]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok: twin");

    let out = run_in(dir.path(), &["templates"]);
    assert_eq!(out.status.code(), Some(0));
    let listing = String::from_utf8_lossy(&out.stdout);
    assert_eq!(listing.lines().filter(|l| l.starts_with("== ")).count(), 6);

    let out = run_in(dir.path(), &["templates", "lift"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout), template("lift").unwrap());
    assert_eq!(run_in(dir.path(), &["templates", "warp"]).status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", &template_value("gauge"));
    let out = run_in(dir.path(), &["run", "--seed", "99", "--out", "o", &scenario]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["seed_override"], 99);
    assert!(dir.path().join("o/gauge.json").exists());

    let plain = run_in(dir.path(), &["run", &scenario]);
    let record: Value = serde_json::from_slice(&plain.stdout).unwrap();
    assert!(record.get("seed_override").is_none());
}

#[test]
fn same_scenario_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", &template_value("lift"));
    for out_dir in ["a", "b"] {
        assert_eq!(
            run_in(dir.path(), &["run", "--quiet", "--out", out_dir, &scenario])
                .status
                .code(),
            Some(0)
        );
    }
    for file in ["lift.json", "lift.csv"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn emitted_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", &template_value("evolve"));
    let out = run_in(dir.path(), &["run", "--quiet", &scenario]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read(dir.path().join("evolve.csv")).unwrap();
    assert!(!text.contains(&b'\r'));
    let (times, states) = read_matrix_series_csv(text.as_slice(), 2, 2).unwrap();
    assert_eq!(times.len(), states.len());
    assert!((times[0] - 0.0).abs() == 0.0 && (times[times.len() - 1] - 1.0).abs() <= 1e-15);
    let first = &states[0];
    assert_eq!(first[(0, 0)].re, 0.75);
    assert_eq!(first[(1, 1)].re, 0.25);
    for rho in &states {
        let trace = rho[(0, 0)].re + rho[(1, 1)].re;
        assert!((trace - 1.0).abs() <= 1e-12);
    }
}
