//! End-to-end checks of the scenario pipeline: deterministic replay,
//! artifact formats, scenario documents and the command-line binary.

use std::process::Command;

use scbf::cli::{scenario_from_toml, scenario_to_toml};
use scbf::experiments::{run_closed_loop, ControllerKind, Scenario};

/// Drop the trailing timing field of every data row; wall-clock values
/// are the only nondeterministic CSV content.
fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            if line.starts_with('#') {
                match line.find(" wall_s=") {
                    Some(pos) => line[..pos].to_string(),
                    None => line.to_string(),
                }
            } else if line.starts_with('k') {
                line.to_string()
            } else {
                match line.rfind(',') {
                    Some(pos) => line[..pos].to_string(),
                    None => line.to_string(),
                }
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn short_scenario() -> Scenario {
    let mut s = Scenario::tracking_default();
    s.k_max = 40;
    s.controller = ControllerKind::Sequential;
    s
}

#[test]
fn replay_is_deterministic() {
    let scenario = short_scenario();
    let a = run_closed_loop(&scenario).unwrap();
    let b = run_closed_loop(&scenario).unwrap();
    assert_eq!(strip_timing(&a.to_csv()), strip_timing(&b.to_csv()));
    assert_eq!(a.collided, b.collided);
    assert_eq!(a.first_infeasible_k, b.first_infeasible_k);

    let mut reseeded = scenario.clone();
    reseeded.seed += 1;
    let c = run_closed_loop(&reseeded).unwrap();
    assert_ne!(
        strip_timing(&a.to_csv()),
        strip_timing(&c.to_csv()),
        "different seeds must draw different noise"
    );
}

#[test]
fn trajectory_csv_layout() {
    let scenario = short_scenario();
    let log = run_closed_loop(&scenario).unwrap();
    let csv = log.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "k,x0,x1,x2,x3,x4,x5,u0,u1,u2,h_obs1,h_obs2,margin_min,status,solve_ms"
    );
    let expected_fields = header.split(',').count();
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), expected_fields, "ragged row: {line}");
        assert_eq!(fields[0], rows.to_string());
        for f in &fields[1..expected_fields - 2] {
            f.parse::<f64>().unwrap_or_else(|_| panic!("bad float {f}"));
        }
        assert!(fields[expected_fields - 2] == "Feasible" || fields[expected_fields - 2] == "Infeasible");
        rows += 1;
    }
    assert_eq!(rows, log.steps.len());
}

#[test]
fn empty_document_gives_the_default_scenario() {
    let parsed = scenario_from_toml("").unwrap();
    let default = Scenario::tracking_default();
    assert_eq!(parsed.model.dt, default.model.dt);
    assert_eq!(parsed.k_max, default.k_max);
    assert_eq!(parsed.mpc.horizon, default.mpc.horizon);
    assert_eq!(parsed.barrier.gamma, default.barrier.gamma);
    assert_eq!(parsed.obstacles.len(), default.obstacles.len());
    assert_eq!(parsed.controller, default.controller);
}

#[test]
fn scenario_document_round_trip() {
    let mut scenario = Scenario::tracking_default();
    scenario.k_max = 77;
    scenario.seed = 42;
    scenario.barrier.gamma = 0.25;
    scenario.set_sigma2(0.5);
    let text = scenario_to_toml(&scenario).unwrap();
    let parsed = scenario_from_toml(&text).unwrap();
    assert_eq!(parsed.k_max, 77);
    assert_eq!(parsed.seed, 42);
    assert_eq!(parsed.barrier.gamma, 0.25);
    assert_eq!(parsed.model.dt, scenario.model.dt);
    assert_eq!(parsed.obstacles.len(), scenario.obstacles.len());
    for (a, b) in parsed.obstacles.iter().zip(scenario.obstacles.iter()) {
        assert_eq!(a.noise_var, b.noise_var);
        assert_eq!(a.radius, b.radius);
    }
}

#[test]
fn invalid_documents_are_rejected_with_context() {
    let err = scenario_from_toml("[barrier]\ngamma = 1.5\n").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("gamma"), "unhelpful error: {msg}");
    assert!(msg.contains("1.5"), "unhelpful error: {msg}");

    let err = scenario_from_toml("[mpc]\nhorizon = 0\n").unwrap_err();
    assert!(err.to_string().contains("horizon"));

    let err = scenario_from_toml("[mpc]\nhorizons = 5\n").unwrap_err();
    assert!(
        err.to_string().contains("horizons") || err.to_string().contains("unknown"),
        "unknown keys must be rejected: {err}"
    );

    let err = scenario_from_toml("[run]\ncontroller = \"bogus\"\n").unwrap_err();
    assert!(err.to_string().contains("bogus"));
}

#[test]
fn binary_runs_a_scenario_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let scenario_path = dir.path().join("scenario.toml");
    std::fs::write(
        &scenario_path,
        "[run]\nk_max = 30\ncontroller = \"sequential\"\n",
    )
    .unwrap();
    let out = dir.path().join("out");

    let status = Command::new(env!("CARGO_BIN_EXE_scbf"))
        .args([
            "run",
            "--scenario",
            scenario_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--svg",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("k,x0"));
    assert!(csv.contains("# summary: steps=30"));
    let svg = std::fs::read_to_string(out.join("trajectory.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    // A second identical invocation reproduces the same simulation.
    let out2 = dir.path().join("out2");
    let status = Command::new(env!("CARGO_BIN_EXE_scbf"))
        .args([
            "run",
            "--scenario",
            scenario_path.to_str().unwrap(),
            "--out",
            out2.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let csv2 = std::fs::read_to_string(out2.join("trajectory.csv")).unwrap();
    assert_eq!(strip_timing(&csv), strip_timing(&csv2));
}

#[test]
fn binary_rejects_bad_flags() {
    let status = Command::new(env!("CARGO_BIN_EXE_scbf"))
        .args(["run", "--controller", "bogus"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let status = Command::new(env!("CARGO_BIN_EXE_scbf"))
        .args(["frobnicate"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
