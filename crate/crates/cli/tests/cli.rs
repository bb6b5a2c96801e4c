use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn nlreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlreg")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_model(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

#[test]
fn solve_roc_simulate_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let model = fixture("f8.json");
    let model = model.to_str().unwrap();

    let o = nlreg(&["solve", "--model", model, "--order", "30", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sol: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("f8.solution.json")).unwrap()).unwrap();
    assert_eq!(sol["solved_order"], 30);
    assert_eq!(sol["basis"]["n"], 3);
    assert!(sol["model_hash"].as_str().unwrap().len() == 64);
    assert!(sol["tool_version"].is_string());
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("f8.diagnostics.json")).unwrap()).unwrap();
    assert!(diag["wall_seconds"].as_f64().unwrap() > 0.0);
    assert_eq!(diag["hjb_residual"]["passes"], true);

    let o = nlreg(&["roc", "--model", model, "--out", out, "--window", "20..30"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    let rstar: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((rstar - 0.52).abs() < 0.05, "{line}");
    let csv = std::fs::read_to_string(dir.path().join("f8.roc.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "d1,d2,d3,radius,b1,b2,b3");

    let o = nlreg(&["simulate", "--model", model, "--out", out, "--order", "10", "--x0", "0.4363,0,0", "--horizon", "200"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("converged"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("f8.k10.trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,x1,x2,x3,u1,running_cost");

    let o = nlreg(&["compare", "--model", model, "--out", out, "--x0", "0.4363,0,0", "--orders", "1,5,10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("f8.compare.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn compare_orders_on_example51() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let model = fixture("example51.json");
    let model = model.to_str().unwrap();
    assert_eq!(code(&nlreg(&["solve", "--model", model, "--order", "10", "--out", out])), 0);
    let o = nlreg(&["compare", "--model", model, "--out", out, "--x0=-2,-1.5,0", "--orders", "1,3,5,10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("example51.compare.csv")).unwrap();
    let mut cost = std::collections::HashMap::new();
    for row in table.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], "converged", "{row}");
        cost.insert(cols[0].to_string(), cols[5].parse::<f64>().unwrap());
    }
    assert!(cost["5"] < cost["1"]);
}

#[test]
fn reruns_are_byte_identical_and_overwrite_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let model = fixture("example51.json");
    let model = model.to_str().unwrap();
    let path = dir.path().join("example51.solution.json");

    assert_eq!(code(&nlreg(&["solve", "--model", model, "--order", "8", "--out", out])), 0);
    let first = std::fs::read(&path).unwrap();
    let o = nlreg(&["solve", "--model", model, "--order", "8", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    assert_eq!(code(&nlreg(&["solve", "--model", model, "--order", "8", "--out", out, "--force"])), 0);
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let o = nlreg(&["expand", "--model", model, "--order", "4", "--out", out]);
    assert_eq!(code(&o), 0);
    let first = std::fs::read(dir.path().join("example51.expansion.json")).unwrap();
    assert_eq!(code(&nlreg(&["expand", "--model", model, "--order", "4", "--out", out, "--force"])), 0);
    assert_eq!(std::fs::read(dir.path().join("example51.expansion.json")).unwrap(), first);
}

#[test]
fn expansion_report_contents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = nlreg(&["expand", "--model", fixture("example51.json").to_str().unwrap(), "--order", "5", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("example51.expansion.json")).unwrap()).unwrap();
    assert_eq!(rep["F"][0]["k"], 1);
    assert_eq!(rep["F"][0]["coefficients"][0][1], 3.0);
    assert_eq!(rep["checks"]["stabilizable"], true);

    let o = nlreg(&["expand", "--model", fixture("linear.json").to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 0);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("linear.expansion.json")).unwrap()).unwrap();
    for block in rep["F"].as_array().unwrap().iter().skip(1) {
        assert!(block["coefficients"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).all(|v| v.as_f64() == Some(0.0)));
    }
}

#[test]
fn conditioning_transform_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = nlreg(&["solve", "--model", fixture("badcond2x2.json").to_str().unwrap(), "--order", "5", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("badcond2x2.diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["conditioning"]["transformed"], true);
    assert!(diag["conditioning"]["alpha"].as_f64().unwrap() > 0.0);
}

#[test]
fn order_one_is_lqr_and_zero_state_is_trivial() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let model = fixture("linear.json");
    let model = model.to_str().unwrap();
    assert_eq!(code(&nlreg(&["solve", "--model", model, "--order", "1", "--out", out])), 0);
    let sol: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("linear.solution.json")).unwrap()).unwrap();
    assert_eq!(sol["coefficients"].as_array().unwrap().len(), 1);

    let o = nlreg(&["simulate", "--model", model, "--out", out, "--x0", "0,0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("linear.k1.trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().ends_with(",0.000000000000e0"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let bad = write_model(
        dir.path(),
        "bad.json",
        r#"{"n":1,"m":1,"dynamics":["x1 + * u1"],"Q":"x1^2","penalty":{"kind":"quadratic","R1":[[1]]},"order":3}"#,
    );
    let o = nlreg(&["solve", "--model", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1, column 6"), "{}", stderr(&o));

    let big = write_model(
        dir.path(),
        "big.json",
        r#"{"n":6,"m":1,"dynamics":["x2","x3","x4","x5","x6","u1"],"Q":"x1^2+x2^2+x3^2+x4^2+x5^2+x6^2",
            "penalty":{"kind":"quadratic","R1":[[1]]},"order":20}"#,
    );
    let o = nlreg(&["solve", "--model", big.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = nlreg(&["solve", "--model", fixture("example51.json").to_str().unwrap(), "--order", "6", "--out", out, "--tol", "1e-300"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("error[residual]"), "{}", stderr(&o));

    let o = nlreg(&["simulate", "--model", fixture("scalar.json").to_str().unwrap(), "--out", out, "--x0", "0.1"]);
    assert_eq!(code(&o), 2, "missing solution file");

    let o = nlreg(&["solve", "--model", fixture("scalar.json").to_str().unwrap(), "--order", "61", "--out", out]);
    assert_eq!(code(&o), 2);

    let uncontrollable = write_model(
        dir.path(),
        "unstab.json",
        r#"{"n":2,"m":1,"dynamics":["x1","u1"],"Q":"x1^2+x2^2","penalty":{"kind":"quadratic","R1":[[1]]},"order":3}"#,
    );
    let o = nlreg(&["solve", "--model", uncontrollable.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn solution_for_a_different_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&nlreg(&["solve", "--model", fixture("f8.json").to_str().unwrap(), "--order", "4", "--out", out])), 0);
    let sol = dir.path().join("f8.solution.json");
    let o = nlreg(&[
        "simulate",
        "--model",
        fixture("example51.json").to_str().unwrap(),
        "--solution",
        sol.to_str().unwrap(),
        "--out",
        out,
        "--x0",
        "0.1,0,0",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("computed for model"), "{}", stderr(&o));

    let o = nlreg(&["simulate", "--model", fixture("f8.json").to_str().unwrap(), "--out", out, "--x0", "0.1,0"]);
    assert_eq!(code(&o), 2);
}
