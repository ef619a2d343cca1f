use std::path::PathBuf;
use std::process::Command;

use safeplan::mpc::Variant;
use safeplan::sim::{self, trace_csv, Outcome, RunOptions, Scenario, Simulation, TRACE_COLUMNS};

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(scenario_path(name)).unwrap()
}

#[test]
fn shipped_scenarios_validate_and_round_trip() {
    for name in ["overtake", "two_static", "blockade"] {
        let sc = scenario(name);
        sc.validate().unwrap();
        assert_eq!(Scenario::from_toml(&sc.to_toml()).unwrap(), sc);
    }
}

#[test]
fn traces_are_bitwise_reproducible() {
    let sc = scenario("overtake");
    let options = RunOptions { ticks: Some(60), seed: 3, ..RunOptions::default() };
    let a = sim::run(&sc, Variant::Su, &options).unwrap();
    let b = sim::run(&sc, Variant::Su, &options).unwrap();
    assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
    assert_eq!(a.outcome, b.outcome);
}

#[test]
fn applies_first_control_and_progresses_monotonically() {
    let sc = scenario("overtake");
    let mut sim = Simulation::new(&sc, Variant::Mpc, &RunOptions::default()).unwrap();
    let mut applied = Vec::new();
    while sim.step().unwrap() {
        if let Some(plan) = &sim.planner().previous {
            if plan.tick + 1 == sim.tick() {
                applied.push(plan.first_control());
            }
        }
    }
    let result = sim.into_result();
    assert_eq!(result.outcome, Outcome::Completed);
    assert!(!result.collision);
    assert_eq!(applied.len(), result.trace.len());
    for (row, u) in result.trace.iter().zip(&applied) {
        assert_eq!((row.u1, row.u2), (u.u1, u.u2), "tick {}", row.tick);
    }
    for w in result.trace.windows(2) {
        assert!(w[1].s >= w[0].s, "s went back at tick {}", w[1].tick);
    }
}

#[test]
fn stop_fallback_respects_the_speed_envelope_at_a_blockade() {
    let sc = scenario("blockade");
    let mut sim = Simulation::new(&sc, Variant::Ss, &RunOptions::default()).unwrap();
    loop {
        let inputs = sim.prepare().ok();
        let more = sim.step().unwrap();
        if let (Some(inputs), Some(plan)) = (inputs, &sim.planner().previous) {
            if plan.tick == inputs.tick && inputs.corridor.blockade.is_blocked() {
                let last = plan.trajectory.states.last().unwrap();
                let envelope = inputs.corridor.speed.eval(last.s);
                let tol = sim.planner().config.tolerances.families[4];
                assert!(last.v <= envelope + tol, "tick {}: terminal v {} above {}", inputs.tick, last.v, envelope);
            }
        }
        if !more {
            break;
        }
    }
    let result = sim.into_result();
    assert!(matches!(result.outcome, Outcome::HaltedAtBlockade { .. }), "{:?}", result.outcome);
}

fn plan_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_plan")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let halted = plan_cli(&["run", scenario_path("blockade").to_str().unwrap(), "--variant", "mpc", "--out", out_s, "--table"]);
    assert_eq!(halted.status.code(), Some(0), "{}", String::from_utf8_lossy(&halted.stderr));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let header: Vec<&str> = trace.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..TRACE_COLUMNS.len()], &TRACE_COLUMNS[..]);
    for f in ["constraints.csv", "timing.csv", "summary.json", "table.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let failed = plan_cli(&["run", scenario_path("two_static").to_str().unwrap(), "--variant", "mpc", "--out", out_s]);
    assert_eq!(failed.status.code(), Some(2), "{}", String::from_utf8_lossy(&failed.stdout));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nunknown = 1\n").unwrap();
    let invalid = plan_cli(&["run", bad.to_str().unwrap(), "--variant", "mpc", "--out", out_s]);
    assert_eq!(invalid.status.code(), Some(3));

    let mut sc = scenario("blockade");
    sc.run.halt_speed = -1.0;
    std::fs::write(&bad, sc.to_toml()).unwrap();
    let invalid = plan_cli(&["run", bad.to_str().unwrap(), "--variant", "ss", "--out", out_s]);
    assert_eq!(invalid.status.code(), Some(3));

    let json = plan_cli(&["run", scenario_path("overtake").to_str().unwrap(), "--variant", "re", "--out", out_s, "--ticks", "5", "--emit", "json"]);
    assert_eq!(json.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
}
