use rovermesh::ground_station::protocol::ClientCommand;
use rovermesh::scenario::{self, parse_scenario, MetricsLog, RunOptions, ScenarioSpec, Simulation, Verdict};

const SMALL: &str = r#"
name = "small"
seed = 11
duration_s = 600.0

[world]
width_m = 20.0
height_m = 14.0
resolution_m = 0.1
obstacles = [
    { kind = "boulder", x = 12.0, y = 4.0, radius = 0.6 },
    { kind = "wall", x = 8.0, y = 10.0, half_width = 0.5, half_height = 0.3 },
    { kind = "crater", x = 15.0, y = 9.0, radius = 1.5 },
]

[lander]
x = 3.0
y = 7.0

[[rovers]]
name = "a"
x = 4.0
y = 8.0

[[rovers]]
name = "b"
x = 4.0
y = 6.0

[[events]]
kind = "script_lights"
at = 5.0
rover = "a"
on = true

[[events]]
kind = "script_route"
at = 30.0
rover = "a"
waypoints = [[10.0, 8.0], [16.0, 5.0]]

[[events]]
kind = "script_teleop"
at = 40.0
rover = "b"
v = 0.1
w = 0.0
duration_s = 60.0
"#;

fn small() -> ScenarioSpec {
    parse_scenario(SMALL).unwrap()
}

fn run(spec: ScenarioSpec) -> MetricsLog {
    scenario::run(spec, RunOptions::default()).unwrap()
}

#[test]
fn small_scenario_maps_something() {
    let log = run(small());
    let s = log.summary().unwrap();
    assert!(s["coverage"].as_f64().unwrap() > 0.1, "{s}");
    assert_eq!(s["faults"], 0);
    log.verify().unwrap();
}

#[test]
fn same_seed_same_checksum() {
    let a = run(small());
    let b = run(small());
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.lines(), b.lines());
}

#[test]
fn other_seed_other_checksum() {
    let mut spec = small();
    spec.seed += 1;
    assert_ne!(run(small()).checksum(), run(spec).checksum());
}

#[test]
fn shutting_every_rover_down_at_once_maps_nothing() {
    let mut text = SMALL.to_string();
    for r in ["a", "b"] {
        text.push_str(&format!("\n[[events]]\nkind = \"shutdown_rover\"\nat = 0.0\nrover = \"{r}\"\n"));
    }
    let log = run(parse_scenario(&text).unwrap());
    let s = log.summary().unwrap();
    assert!(s["coverage"].as_f64().unwrap() < 0.01, "{s}");
    for m in log.records("metrics") {
        for (_, r) in m["rovers"].as_object().unwrap() {
            assert_eq!(r["powered"], false);
            assert_eq!(r["distance_m"], 0.0);
        }
        assert_eq!(m["bytes_by_namespace"]["a"], 0);
        assert_eq!(m["bytes_by_namespace"]["b"], 0);
    }
}

#[test]
fn namespace_bytes_add_up_to_wire_bytes() {
    let log = run(small());
    let mut n = 0;
    for m in log.records("metrics").chain(log.records("summary")) {
        let sum: u64 = m["bytes_by_namespace"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(sum, m["wire_bytes"].as_u64().unwrap(), "{m}");
        n += 1;
    }
    assert!(n >= 10);
}

#[test]
fn coverage_never_drops() {
    let log = run(small());
    let cov: Vec<f64> = log.records("metrics").map(|m| m["coverage"].as_f64().unwrap()).collect();
    assert!(cov.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{cov:?}");
}

#[test]
fn monitoring_does_not_change_the_traffic() {
    let on = run(small());
    let off = scenario::run(small(), RunOptions { monitoring: false, ..Default::default() }).unwrap();
    let (a, b) = (on.summary().unwrap(), off.summary().unwrap());
    assert_eq!(a["wire_bytes"], b["wire_bytes"]);
    assert_eq!(a["bytes_by_namespace"], b["bytes_by_namespace"]);
}

#[test]
fn replay_of_a_headless_run_is_identical() {
    let log = run(small());
    match scenario::replay(&log.to_text()).unwrap() {
        Verdict::Identical { checksum } => assert_eq!(Some(checksum.as_str()), log.checksum()),
        v => panic!("{v:?}"),
    }
}

#[test]
fn replay_reapplies_operator_input() {
    let mut sim = Simulation::new(small(), RunOptions::default()).unwrap();
    sim.advance(50.0);
    sim.apply_operator(&ClientCommand::Select { name: Some("b".into()) }).unwrap();
    sim.apply_operator(&ClientCommand::Lights { on: true }).unwrap();
    sim.advance(120.0);
    sim.apply_operator(&ClientCommand::Reboot).unwrap();
    let log = sim.run();
    assert_eq!(log.records("operator").count(), 3);
    assert!(matches!(scenario::replay(&log.to_text()).unwrap(), Verdict::Identical { .. }));
}

#[test]
fn tampered_log_does_not_replay_identically() {
    let log = run(small());
    let text = log.to_text();
    let target = text.lines().nth(3).unwrap().to_string();
    let tampered_line = target.replacen("\"t\":", "\"t\":1", 1);
    assert_ne!(target, tampered_line);
    let tampered = text.replacen(&target, &tampered_line, 1);
    match scenario::replay(&tampered) {
        Ok(Verdict::Diverged { line, .. }) => assert_eq!(line, 4),
        Err(_) => {}
        Ok(v) => panic!("tampering went unnoticed: {v:?}"),
    }
    assert!(MetricsLog::parse(&tampered).unwrap().verify().is_err());
}

#[test]
fn command_without_selection_is_refused_and_sends_nothing() {
    let mut spec = small();
    spec.events.clear();
    let mut sim = Simulation::new(spec, RunOptions::default()).unwrap();
    sim.advance(10.0);
    assert!(sim.apply_operator(&ClientCommand::Reboot).is_err());
    let log = sim.run();
    assert_eq!(log.summary().unwrap()["commands_sent"], 0);
}

#[test]
fn scripted_route_moves_the_anchor_rover() {
    let mut sim = Simulation::new(small(), RunOptions::default()).unwrap();
    sim.advance(25.0);
    let before = sim.true_pose("a").unwrap();
    sim.advance(300.0);
    let after = sim.true_pose("a").unwrap();
    assert!(before.position().dist(after.position()) > 5.0, "{before:?} {after:?}");
    assert!(sim.merged_map().is_some());
}
