//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//! Exits non-zero if any criterion fails.

mod support;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rovermesh::comms::*;
use rovermesh::geometry::{Pose2, Vec2};
use rovermesh::ground_station::protocol::ClientCommand;
use rovermesh::kernel::{Kernel, RngStream};
use rovermesh::mapping::{match_and_estimate, MergeError, MergeParams};
use rovermesh::meshnet::*;
use rovermesh::rover::{Rover, RoverConfig};
use rovermesh::scenario::{self, parse_scenario, MetricsLog, RunOptions, ScenarioSpec, Simulation};

use support::synthetic::pair_with_overlap;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// Bare mesh.

#[derive(Debug)]
enum MeshEv {
    Mesh(MeshEvent),
    Send { src: NodeId, dst: NodeId, seq: u64 },
}

impl From<MeshEvent> for MeshEv {
    fn from(e: MeshEvent) -> Self {
        MeshEv::Mesh(e)
    }
}

struct MeshRig {
    kernel: Kernel<MeshEv>,
    mesh: Mesh<u64>,
    delivered: Vec<(f64, NodeId, usize)>,
}

impl MeshRig {
    fn new(seed: u64, nodes: &[(String, (f64, f64))]) -> MeshRig {
        let mut kernel = Kernel::new(seed);
        let rng = kernel.fork_rng("mesh").unwrap();
        let mut mesh = Mesh::new(NetParams::default(), rng);
        for (name, (x, y)) in nodes {
            mesh.add_node(name, Some(Vec2::new(*x, *y))).unwrap();
        }
        MeshRig { kernel, mesh, delivered: Vec::new() }
    }

    fn cbr(&mut self, src: NodeId, dst: NodeId, rate_hz: f64, from: f64, to: f64) {
        let n = ((to - from) * rate_hz).round() as u64;
        for k in 0..n {
            self.kernel.schedule(from + k as f64 / rate_hz, "app", MeshEv::Send { src, dst, seq: k }).unwrap();
        }
    }

    fn run(&mut self, until: f64, bytes: usize) {
        let MeshRig { kernel, mesh, delivered } = self;
        mesh.start(kernel);
        let mut outs = Vec::new();
        kernel.run_until(until, |k, fired| match fired.payload {
            MeshEv::Mesh(e) => outs.extend(mesh.handle(k, e)),
            MeshEv::Send { src, dst, seq } => {
                let _ = mesh.send(k, src, dst, bytes, 0, TrafficClass::Data, seq, &mut outs);
            }
        });
        for o in outs {
            if let MeshOutput::Delivered { frame, to, at } = o {
                delivered.push((at, to, frame.payload_bytes));
            }
        }
    }

    fn goodput_bps(&self, dst: NodeId, window: f64) -> f64 {
        self.delivered.iter().filter(|d| d.1 == dst).map(|d| d.2 as f64 * 8.0).sum::<f64>() / window
    }
}

fn named(nodes: &[(&str, (f64, f64))]) -> Vec<(String, (f64, f64))> {
    nodes.iter().map(|(n, p)| (n.to_string(), *p)).collect()
}

fn range_gate() -> Verdict {
    let mut got = Vec::new();
    for d in [219.0, 221.0] {
        let mut rig = MeshRig::new(1, &named(&[("a", (0.0, 0.0)), ("b", (d, 0.0))]));
        rig.cbr(0, 1, 10.0, 1.0, 31.0);
        rig.run(40.0, 1000);
        got.push(rig.goodput_bps(1, 30.0));
    }
    verdict(
        got[0] > 0.0 && got[1] == 0.0,
        format!("goodput {:.0} bit/s at 219 m, {:.0} bit/s at 221 m", got[0], got[1]),
    )
}

fn relay_gain() -> Verdict {
    // GS 130 m from the relay, relay 100 m from the rover, GS 220 m from the rover.
    let x = (220.0f64.powi(2) - 100.0f64.powi(2) + 130.0f64.powi(2)) / 260.0;
    let y = (220.0f64.powi(2) - x * x).sqrt();
    let mut goodput = Vec::new();
    for relay in [false, true] {
        let mut nodes = vec![("gs", (0.0, 0.0)), ("rover", (x, y))];
        if relay {
            nodes.push(("relay", (130.0, 0.0)));
        }
        let mut rig = MeshRig::new(7, &named(&nodes));
        rig.cbr(0, 1, 20.0, 0.0, 60.0);
        rig.run(61.0, 1400);
        goodput.push(rig.goodput_bps(1, 60.0));
    }
    let gain = goodput[1] / goodput[0];
    verdict(
        (2.0..=10.0).contains(&gain),
        format!("gain {gain:.2} (direct {:.0} bit/s, relayed {:.0} bit/s), band [2, 10]", goodput[0], goodput[1]),
    )
}

fn dijkstra(n: usize, w: &BTreeMap<(usize, usize), f64>, src: usize, dst: usize) -> f64 {
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[src] = 0.0;
    while let Some(u) = (0..n).filter(|&i| !done[i] && dist[i].is_finite()).min_by(|&a, &b| dist[a].total_cmp(&dist[b])) {
        done[u] = true;
        for (&(a, b), &c) in w {
            let v = if a == u { b } else if b == u { a } else { continue };
            dist[v] = dist[v].min(dist[u] + c);
        }
    }
    dist[dst]
}

fn routing_optimality() -> Verdict {
    let mut rng = RngStream::new(2024, "topologies");
    let (mut routed, mut unreachable, mut wrong) = (0, 0, Vec::new());
    for t in 0..200u64 {
        let n = 2 + rng.below(7);
        let nodes: Vec<(String, (f64, f64))> =
            (0..n).map(|k| (format!("n{k}"), (rng.range(0.0, 400.0), rng.range(0.0, 400.0)))).collect();
        let mut rig = MeshRig::new(t, &nodes);
        let params = rig.mesh.params.clone();
        let w: BTreeMap<(usize, usize), f64> =
            rig.mesh.links().filter(|l| l.up).map(|l| ((l.a, l.b), airtime_plus(l, &params))).collect();
        let best = dijkstra(n, &w, 0, n - 1);
        rig.kernel.schedule(0.5, "app", MeshEv::Send { src: 0, dst: n - 1, seq: 0 }).unwrap();
        rig.run(3.0, 10);
        match rig.mesh.tables()[0].get(n - 1).map(|e| e.metric) {
            Some(m) if (m - best).abs() <= 1e-9 * best.max(1.0) => routed += 1,
            None if best.is_infinite() => unreachable += 1,
            other => wrong.push(format!("#{t}: {other:?} vs {best}")),
        }
    }
    verdict(
        wrong.is_empty(),
        format!("{routed} routed at the optimum, {unreachable} unreachable, {} wrong{}", wrong.len(), wrong.first().map(|w| format!(" (first {w})")).unwrap_or_default()),
    )
}

// Publish/subscribe over the mesh.

#[derive(Debug)]
enum NetEv {
    Net(NetEvent),
    Publish { node: NodeId, topic: Topic, bytes: usize, qos: Qos },
    Power { node: NodeId, on: bool },
}

impl From<MeshEvent> for NetEv {
    fn from(e: MeshEvent) -> Self {
        NetEv::Net(NetEvent::Mesh(e))
    }
}

impl From<CommsEvent> for NetEv {
    fn from(e: CommsEvent) -> Self {
        NetEv::Net(NetEvent::Comms(e))
    }
}

struct NetRig {
    kernel: Kernel<NetEv>,
    net: Network,
    got: Vec<(NodeId, Arc<Envelope>, f64)>,
    started: bool,
}

impl NetRig {
    fn new(seed: u64) -> NetRig {
        let mut kernel = Kernel::new(seed);
        let rng = kernel.fork_rng("mesh").unwrap();
        NetRig { kernel, net: Network::new(NetParams::default(), CommsParams::default(), rng), got: Vec::new(), started: false }
    }

    fn node(&mut self, name: &str, at: Option<(f64, f64)>) -> NodeId {
        let id = self.net.add_node(name, at.map(|(x, y)| Vec2::new(x, y))).unwrap();
        self.net.claim_namespace(id, name);
        id
    }

    fn publish_at(&mut self, t: f64, node: NodeId, topic: &str, bytes: usize, qos: Qos) {
        let topic = Topic::parse(topic).unwrap();
        self.kernel.schedule(t, "app", NetEv::Publish { node, topic, bytes, qos }).unwrap();
    }

    fn run(&mut self, until: f64) {
        let NetRig { kernel, net, got, started } = self;
        if !std::mem::replace(started, true) {
            net.start(kernel);
        }
        kernel.run_until(until, |k, fired| {
            let mut out = Vec::new();
            match fired.payload {
                NetEv::Net(e) => out = net.handle(k, e),
                NetEv::Publish { node, topic, bytes, qos } => {
                    let _ = net.publish(k, node, &topic, Payload::Bytes(Arc::new(vec![0; bytes])), qos, &mut out);
                }
                NetEv::Power { node, on } => net.set_powered(k, node, on, &mut out),
            }
            for o in out {
                if let CommsOutput::Delivery { node, envelope, at } = o {
                    got.push((node, envelope, at));
                }
            }
        });
    }

    fn seqs(&self, node: NodeId, path: &str) -> Vec<u64> {
        self.got.iter().filter(|g| g.0 == node && g.1.topic.path() == path).map(|g| g.1.seq).collect()
    }
}

fn path_names(rig: &NetRig, path: &Option<Vec<NodeId>>) -> String {
    match path {
        Some(p) => p.iter().map(|&n| rig.net.mesh.name(n).to_string()).collect::<Vec<_>>().join("-"),
        None => "none".into(),
    }
}

fn rerouting() -> Verdict {
    let mut rig = NetRig::new(3);
    let s = rig.node("s", Some((0.0, 0.0)));
    let r1 = rig.node("r1", Some((115.0, 10.0)));
    let r2 = rig.node("r2", Some((115.0, -110.0)));
    let d = rig.node("d", Some((230.0, 0.0)));
    rig.net.subscribe(d, Pattern::parse("s/data").unwrap());
    let n = 300;
    for k in 0..n {
        rig.publish_at(1.0 + k as f64 * 0.1, s, "s/data", 400, Qos::Reliable);
    }
    let fault = 12.0;
    rig.kernel.schedule(fault, "fault", NetEv::Power { node: r1, on: false }).unwrap();
    rig.run(fault - 1.0);
    let before = rig.net.mesh.route(s, d, fault - 1.0);
    rig.run(fault + 10.0);
    let after = rig.net.mesh.route(s, d, fault + 10.0);
    rig.run(90.0);
    let fresh = rig.got.iter().filter(|g| g.0 == d && g.1.sent_at > fault).map(|g| g.2).fold(f64::INFINITY, f64::min);
    let seqs = rig.seqs(d, "s/data");
    let in_order = seqs == (1..=n).collect::<Vec<u64>>();
    let restored = fresh - fault;
    verdict(
        before == Some(vec![s, r1, d]) && after == Some(vec![s, r2, d]) && restored <= 10.0 && in_order,
        format!(
            "route {} -> {}, delivery restored {restored:.2} s after the fault (limit 10 s), {} of {n} in order without gaps: {in_order}",
            path_names(&rig, &before),
            path_names(&rig, &after),
            seqs.len()
        ),
    )
}

fn blackout_store_and_forward() -> Verdict {
    let mut rig = NetRig::new(4);
    let lander = rig.node("lander", Some((0.0, 0.0)));
    let gs = rig.node("ground_station", None);
    rig.net.add_fixed_link(lander, gs, 2e6, 0.0, 1.0);
    let rover = rig.node("leo1", Some((100.0, 0.0)));
    rig.net.subscribe(gs, Pattern::parse("*/map").unwrap());
    rig.net.subscribe(gs, Pattern::parse("*/odom").unwrap());
    let (start, end) = (40.0, 100.0);
    rig.net.mesh.add_blackout(&mut rig.kernel, Blackout { start, end, links: LinkSelector::new("lander", "ground_station") });
    let maps = 30;
    for k in 0..maps {
        rig.publish_at(5.0 + k as f64 * 5.0, rover, "leo1/map", 6000, Qos::Reliable);
    }
    for k in 0..300 {
        rig.publish_at(5.0 + k as f64 * 0.5, rover, "leo1/odom", 40, Qos::BestEffort);
    }
    rig.run(200.0);
    let during = rig.got.iter().filter(|g| g.0 == gs && g.2 > start && g.2 < end).count();
    let seqs = rig.seqs(gs, "leo1/map");
    let complete = seqs == (1..=maps).collect::<Vec<u64>>();
    let held = rig.got.iter().filter(|g| g.0 == gs && g.1.topic.name == "map" && g.1.sent_at > start && g.1.sent_at < end).count();
    verdict(
        during == 0 && complete && held > 0,
        format!(
            "{during} envelopes at the ground station during the 60 s blackout, {held} maps held and forwarded, {} of {maps} maps in order without gaps: {complete}",
            seqs.len()
        ),
    )
}

// Maps.

fn merge_gate() -> Verdict {
    let params = MergeParams::default();
    let res = 0.1;
    let mut rng = RngStream::new(77, "merge-gate");
    let mut merge_rng = RngStream::new(77, "ransac");
    let (mut ok, mut fails) = (0, Vec::new());
    let (mut worst_t, mut worst_r) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let pair = pair_with_overlap(&mut rng, 0.2, 0.9);
        match match_and_estimate(&pair.a, &pair.b, &params, &mut merge_rng) {
            Ok(m) => {
                let dt = m.transform.translation_dist(&pair.truth);
                let dr = m.transform.angle_dist(&pair.truth).to_degrees();
                worst_t = worst_t.max(dt);
                worst_r = worst_r.max(dr);
                if dt <= res && dr <= 2.0 && m.inlier_count >= params.min_inliers {
                    ok += 1;
                } else {
                    fails.push(format!("#{k} overlap {:.2}: off {dt:.3} m {dr:.2} deg", pair.overlap));
                }
            }
            Err(e) => fails.push(format!("#{k} overlap {:.2}: {e}", pair.overlap)),
        }
    }
    let mut refused = 0;
    for k in 0..20 {
        let pair = pair_with_overlap(&mut rng, 0.02, 0.19);
        match match_and_estimate(&pair.a, &pair.b, &params, &mut merge_rng) {
            Err(MergeError::InsufficientOverlap { .. }) => refused += 1,
            other => fails.push(format!("low #{k} overlap {:.2}: {:?}", pair.overlap, other.map(|m| m.overlap_ratio))),
        }
    }
    verdict(
        fails.is_empty(),
        format!(
            "{ok}/100 pairs recovered (worst {:.3} m, {worst_r:.2} deg; limits {res} m, 2 deg), {refused}/20 low-overlap pairs refused as insufficient overlap{}",
            worst_t,
            fails.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    )
}

fn odometry() -> Verdict {
    let config = RoverConfig::default();
    let bound = config.odometry.drift_rate * 20.0;
    let mut rover = Rover::new("leo1", Pose2::IDENTITY, config, 5);
    let (mut worst, mut degraded, mut travelled) = (0.0f64, false, 0.0);
    while travelled < 20.0 - 1e-9 {
        let dt = (0.2f64).min((20.0 - travelled) / 0.05);
        travelled += rover.apply_drive((0.05, 0.0), dt, None).unwrap().distance;
        worst = worst.max(rover.odom_error());
        degraded |= rover.odometry_degraded();
    }
    let pose = rover.true_pose();
    rover.reset_odometry(pose).unwrap();
    let after = rover.odom_error();
    verdict(
        worst <= bound && !degraded && after == 0.0 && rover.drift() == 0.0,
        format!(
            "{travelled:.2} m at 0.05 m/s: worst error {worst:.3} m (limit {bound:.3} m), degraded {degraded}, error after reset {after:e}"
        ),
    )
}

// Whole system.

const SMALL: &str = r#"
name = "acceptance-small"
seed = 3
duration_s = 300.0

[world]
width_m = 20.0
height_m = 14.0
obstacles = [
    { kind = "boulder", x = 12.0, y = 4.0, radius = 0.6 },
    { kind = "wall", x = 8.0, y = 10.0, half_width = 0.5, half_height = 0.3 },
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
x = 6.0
y = 5.0

[[events]]
kind = "script_route"
at = 20.0
rover = "a"
waypoints = [[10.0, 8.0], [16.0, 5.0]]

[[events]]
kind = "script_teleop"
at = 30.0
rover = "b"
v = 0.1
w = 0.05
duration_s = 60.0
"#;

fn delay() -> Verdict {
    // Rovers stay put so the path and its link rates hold for every sample.
    let mut spec = parse_scenario(SMALL).unwrap();
    spec.events.clear();
    let mut sim = Simulation::new(spec, RunOptions::default()).unwrap();
    sim.advance(10.0);
    sim.apply_operator(&ClientCommand::Select { name: Some("a".into()) }).unwrap();
    for k in 0..12 {
        sim.advance(12.0 + 4.0 * k as f64);
        sim.apply_operator(&ClientCommand::Lights { on: k % 2 == 0 }).unwrap();
    }
    sim.advance(70.0);
    let st = &sim.state;
    let mesh = &st.net.mesh;
    let node = |n: &str| st.net.node_id(n).unwrap();
    let (a, lander, gs) = (node("a"), node(&st.spec.lander.name), node(&st.spec.ground_station.name));
    // The ground station hangs off the lander by its fixed link.
    let mut path = vec![gs];
    path.extend(mesh.route(lander, a, sim.now()).unwrap_or_default());
    let mtu_bits = st.net.params.mtu_bytes as f64 * 8.0;
    let serialization: f64 = path.windows(2).map(|w| mesh.link(w[0], w[1]).unwrap().attempt_time(mtu_bits, &mesh.params)).sum();
    let quantum = 1e-6;
    let hi = 2.0 + 2.0 * serialization + 2.0 * quantum;
    // The first exchange also pays for route discovery.
    let rtts = st.gs.rtt_samples();
    let warm = &rtts[1.min(rtts.len())..];
    let lo_seen = warm.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_seen = warm.iter().copied().fold(0.0, f64::max);
    verdict(
        warm.len() >= 10 && lo_seen >= 2.0 && hi_seen <= hi,
        format!(
            "{} warm round trips over {} hops in [{lo_seen:.6}, {hi_seen:.6}] s, band [2.0, {hi:.6}] s (first with discovery {:.3} s)",
            warm.len(),
            path.len().saturating_sub(1),
            rtts.first().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn monitoring_neutrality() -> Verdict {
    let spec = parse_scenario(SMALL).unwrap();
    let on = scenario::run(spec.clone(), RunOptions { monitoring: true, ..Default::default() }).unwrap();
    let off = scenario::run(spec, RunOptions { monitoring: false, ..Default::default() }).unwrap();
    let (a, b) = (on.summary().unwrap(), off.summary().unwrap());
    verdict(
        a["wire_bytes"] == b["wire_bytes"] && a["bytes_by_namespace"] == b["bytes_by_namespace"],
        format!("wire bytes {} with monitoring, {} without", a["wire_bytes"], b["wire_bytes"]),
    )
}

fn canonical() -> ScenarioSpec {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/esa_esric_final.scn");
    parse_scenario(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn timed_run(spec: ScenarioSpec) -> (MetricsLog, Duration) {
    let t0 = Instant::now();
    let log = scenario::run(spec, RunOptions::default()).unwrap();
    (log, t0.elapsed())
}

fn coverage_mission(log: &MetricsLog, wall: Duration, spec: &ScenarioSpec) -> Verdict {
    let s = log.summary().unwrap();
    let cov = s["coverage"].as_f64().unwrap_or(0.0);
    let t = s["t"].as_f64().unwrap_or(0.0);
    let rovers = spec.rovers.len();
    let blackouts = spec.events.iter().filter(|e| matches!(e, scenario::TimedEvent::Blackout { .. })).count();
    verdict(
        cov >= 0.60 && t <= 4.0 * 3600.0 + 1e-9,
        format!(
            "coverage {cov:.3} at t = {t:.0} s (need 0.60 within 14400 s); {rovers} rovers, {blackouts} blackouts; runtime {:.1} s (target 300 s)",
            wall.as_secs_f64()
        ),
    )
}

fn determinism(a: &MetricsLog, b: &MetricsLog) -> Verdict {
    let (x, y) = (a.checksum().unwrap_or("-"), b.checksum().unwrap_or("-"));
    verdict(x == y && a.lines() == b.lines(), format!("checksums {x} and {y}"))
}

fn main() {
    // ACCEPTANCE_FILTER=<substring> runs only the matching criteria.
    let filter = std::env::var("ACCEPTANCE_FILTER").unwrap_or_default();
    let wanted = |name: &str| name.contains(filter.as_str());
    let spec = canonical();
    let missions: Vec<_> = if wanted("coverage mission") || wanted("determinism") {
        let runs = if wanted("determinism") { 2 } else { 1 };
        (0..runs)
            .map(|_| {
                let spec = spec.clone();
                std::thread::spawn(move || timed_run(spec))
            })
            .collect()
    } else {
        Vec::new()
    };

    type Check<'a> = Box<dyn FnOnce() -> Verdict + 'a>;
    let quick: Vec<(&str, Check)> = vec![
        ("range gate", Box::new(range_gate)),
        ("relay gain", Box::new(relay_gain)),
        ("delay", Box::new(delay)),
        ("rerouting", Box::new(rerouting)),
        ("blackout store-and-forward", Box::new(blackout_store_and_forward)),
        ("merge gate", Box::new(merge_gate)),
        ("odometry", Box::new(odometry)),
        ("routing optimality", Box::new(routing_optimality)),
        ("monitoring neutrality", Box::new(monitoring_neutrality)),
    ];
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    for (name, check) in quick {
        if wanted(name) {
            results.push((name, check()));
        }
    }
    let runs: Vec<(MetricsLog, Duration)> = missions.into_iter().map(|h| h.join().unwrap()).collect();
    if wanted("coverage mission") {
        let at = results.iter().position(|r| r.0 == "odometry").unwrap_or(results.len());
        results.insert(at, ("coverage mission", coverage_mission(&runs[0].0, runs[0].1, &spec)));
    }
    if wanted("determinism") {
        let at = results.iter().position(|r| r.0 == "monitoring neutrality").unwrap_or(results.len());
        results.insert(at, ("determinism", determinism(&runs[0].0, &runs[1].0)));
    }

    let mut failed = 0;
    for (name, v) in &results {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
