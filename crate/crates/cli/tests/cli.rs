use std::path::{Path, PathBuf};
use std::process::Command;

use degbill_cli::scenario::Scenario;
use degbill_cli::CliError;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_degbill"))
}

fn run(args: &[&str]) -> i32 {
    degbill_cli::run(std::iter::once("degbill").chain(args.iter().copied()))
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn two_balls_box_runs_and_passes_its_gates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("box");
    let code = run(&["scenario", "run", "--scenario", scenario_path("two_balls_box.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    for f in ["report.json", "chain.csv", "links.csv", "starts.csv", "certificate.csv", "green.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["stages"][0]["summary"]["odd_reflection_links"], true);
    assert_eq!(report["stages"][1]["summary"]["stabilized"], false);
    let links = std::fs::read_to_string(out.join("links.csv")).unwrap();
    assert!(links.starts_with("link[index],symbol[code],action[action],reflections[count]\n"));
    assert!(links.lines().nth(1).unwrap().ends_with(",3"));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [("a", "1"), ("b", "4")];
    for (name, jobs) in runs {
        let out = dir.path().join(name);
        let code = run(&[
            "scenario",
            "run",
            "--scenario",
            scenario_path("two_balls_box.json").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--jobs",
            jobs,
            "--seed",
            "7",
        ]);
        assert_eq!(code, 0);
        let code = run(&["kepler", "table", "--scenario", scenario_path("kepler_grid.json").to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs]);
        assert_eq!(code, 0);
    }
    let a = read_dir_sorted(&dir.path().join("a"));
    let b = read_dir_sorted(&dir.path().join("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn seed_changes_random_starts() {
    let dir = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        let code = run(&["chain", "solve", "--scenario", scenario_path("two_balls_box.json").to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code, 0);
        tables.push(std::fs::read_to_string(out.join("starts.csv")).unwrap());
    }
    assert_ne!(tables[0], tables[1]);
}

#[test]
fn torus_point_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("torus");
    let code = run(&["scenario", "run", "--scenario", scenario_path("torus_point.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let shadow = std::fs::read_to_string(out.join("shadow.csv")).unwrap();
    assert_eq!(shadow.lines().count(), 5);
    assert!(out.join("lyapunov.csv").exists());
}

#[test]
fn single_stage_subcommand_writes_only_its_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    let code = run(&["kepler", "table", "--scenario", scenario_path("kepler_grid.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let names: Vec<String> = read_dir_sorted(&out).into_iter().map(|x| x.0).collect();
    assert_eq!(names, vec!["kepler.csv".to_string(), "report.json".to_string()]);
    let table = std::fs::read_to_string(out.join("kepler.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",ok")));
}

#[test]
fn graph_from_adjacency() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("g.json");
    std::fs::write(
        &file,
        r#"{
            "name": "golden",
            "space": { "kind": "euclidean", "dim": 1 },
            "hamiltonian": { "energy": 0.5 },
            "graph": { "adjacency": [[0, 1], [0]], "path_lengths": [1, 2, 3] },
            "gates": { "min_entropy": 0.48 },
            "pipeline": ["graph_entropy"]
        }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["scenario", "run", "--scenario", file.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let paths = std::fs::read_to_string(out.join("paths.csv")).unwrap();
    let counts: Vec<f64> = paths.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts, vec![3.0, 5.0, 8.0]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let h = report["stages"][0]["summary"]["entropy"].as_f64().unwrap();
    assert!((h - ((1.0 + 5f64.sqrt()) / 2.0).ln()).abs() < 1e-9);
    assert_eq!(std::fs::read_to_string(out.join("graph.txt")).unwrap().is_empty(), false);
}

#[test]
fn failed_gate_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario_path("two_balls_box.json")).unwrap();
    let text = text.replace("\"certificate_stabilizes\": false", "\"certificate_stabilizes\": true");
    let file = dir.path().join("s.json");
    std::fs::write(&file, text).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["scenario", "run", "--scenario", file.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn unknown_field_reports_its_path() {
    let text = std::fs::read_to_string(scenario_path("two_balls_box.json")).unwrap();
    let text = text.replace("\"coords\": [0.3]", "\"coords\": [0.3], \"colour\": 1");
    match Scenario::from_str(&text) {
        Err(CliError::Schema { path, message }) => {
            assert_eq!(path, "chain.points[0].colour");
            assert!(message.contains("colour"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_type_reports_its_path() {
    let text = std::fs::read_to_string(scenario_path("torus_point.json")).unwrap();
    let text = text.replace("\"energy\": 0.5", "\"energy\": \"half\"");
    match Scenario::from_str(&text) {
        Err(CliError::Schema { path, .. }) => assert_eq!(path, "hamiltonian.energy"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn semantic_errors_report_their_path() {
    let text = std::fs::read_to_string(scenario_path("two_balls_box.json")).unwrap();
    let bad = text.replace("\"component\": 0", "\"component\": 3");
    assert!(matches!(Scenario::from_str(&bad), Err(CliError::Schema { path, .. }) if path == "chain.points[0].component"));
    let bad = text.replace("[[-1, 1]]", "[[-1]]");
    assert!(matches!(Scenario::from_str(&bad), Err(CliError::Schema { path, .. }) if path == "chain.code[0]"));
    let bad = text.replace("\"masses\": [1.0, 1.5]", "\"masses\": [1.0, -1.5]");
    assert!(matches!(Scenario::from_str(&bad), Err(CliError::Schema { path, .. }) if path == "hamiltonian.masses[1]"));
    let bad = text.replace("\"chain_certify\"]", "\"kepler_table\"]");
    assert!(matches!(Scenario::from_str(&bad), Err(CliError::Schema { path, .. }) if path == "pipeline[1]"));
}

#[test]
fn malformed_file_exits_with_two_and_prints_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    let text = std::fs::read_to_string(scenario_path("two_balls_box.json")).unwrap();
    std::fs::write(&file, text.replace("\"body_dim\": 1", "\"body_dim\": 2")).unwrap();
    let output = bin().args(["scenario", "run", "--scenario", file.to_str().unwrap(), "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("scatterer.body_dim"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_file_and_bad_usage_exit_with_two() {
    let output = bin().args(["chain", "solve", "--scenario", "/nonexistent/scenario.json"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("/nonexistent/scenario.json"));
    let output = bin().args(["chain", "explode"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}
