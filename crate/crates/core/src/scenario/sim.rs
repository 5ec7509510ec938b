//! The simulation: rovers, lander and ground station wired through the
//! comms stack and driven by one kernel.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::metrics::MetricsLog;
use super::spec::{ScenarioSpec, TimedEvent};
use crate::comms::{
    CommsEvent, CommsOutput, Envelope, MergeReport, NavState, NetEvent, Network, Pattern, Payload, Qos, RoverStatus,
    Topic,
};
use crate::geometry::{Pose2, Vec2};
use crate::ground_station::protocol::{ClientCommand, Snapshot};
use crate::ground_station::{Command, GroundStation, Refusal, GLOBAL_NS};
use crate::kernel::{Fired, Kernel, RngStream};
use crate::mapping::{match_and_estimate, merge, wire, LocalMap, MergedMap, OccupancyGrid};
use crate::meshnet::{Blackout, LinkSelector, MeshEvent, NodeId};
use crate::navigation::{NavEvent, Navigator};
use crate::rover::Rover;
use crate::world::{coverage_fraction, load_world, GroundTruthGrid};

const ROVER_TOPICS: [&str; 6] = ["cmd_vel", "lights", "reset_odom", "reboot", "nav_goal", "cancel_nav"];
const GS_TOPICS: [&str; 5] = ["*/odom", "*/status", "*/map", "*/nav_status", "*/cmd_ack"];
/// Retry gap for scripted goals the ground station refused to send.
const SCRIPT_RETRY_S: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    /// Passive bandwidth monitor at the ground station.
    pub monitoring: bool,
    /// Adds ground truth to operator snapshots. Never affects the run.
    #[serde(skip)]
    pub omniscient: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { monitoring: true, omniscient: false }
    }
}

#[derive(Debug)]
pub enum SimEvent {
    Net(NetEvent),
    Control(usize),
    Sense(usize),
    Status(usize),
    MapPublish(usize),
    Wake(usize),
    Merge,
    GsRefresh,
    Metrics,
    Script(usize),
    TeleopTick { script: usize, until: f64 },
    RouteLeg { script: usize, leg: usize },
}

impl From<MeshEvent> for SimEvent {
    fn from(e: MeshEvent) -> Self {
        SimEvent::Net(NetEvent::from(e))
    }
}

impl From<CommsEvent> for SimEvent {
    fn from(e: CommsEvent) -> Self {
        SimEvent::Net(NetEvent::from(e))
    }
}

struct RoverAgent {
    name: String,
    node: NodeId,
    rover: Rover,
    /// Local map in the rover's odometry frame.
    map: OccupancyGrid,
    nav: Navigator,
    /// (v, w, expires at).
    teleop: Option<(f64, f64, f64)>,
    blocked: bool,
    map_dirty: bool,
    nav_state: NavState,
    odometer: f64,
}

#[derive(Default)]
struct Lander {
    node: NodeId,
    maps: BTreeMap<String, OccupancyGrid>,
    dirty: bool,
    accepted: BTreeMap<String, Pose2>,
    since_registered: BTreeMap<String, u32>,
    reports: BTreeMap<String, MergeReport>,
    merged: Option<MergedMap>,
    cycles: u64,
}

struct Route {
    rover: String,
    waypoints: Vec<[f64; 2]>,
    timeout: f64,
    leg: usize,
    awaiting: bool,
    leg_started: f64,
    sent_at: f64,
}

#[derive(Default)]
struct Period {
    deliveries: u64,
    latency_sum: f64,
    latency_max: f64,
    faults: u64,
}

/// Everything except the kernel, so handlers can borrow both.
pub struct SimState {
    pub spec: ScenarioSpec,
    pub options: RunOptions,
    pub truth: GroundTruthGrid,
    pub net: Network,
    pub gs: GroundStation,
    gs_node: NodeId,
    rovers: Vec<RoverAgent>,
    by_node: Vec<Option<usize>>,
    lander: Lander,
    merge_rng: RngStream,
    routes: BTreeMap<usize, Route>,
    period: Period,
    refusals: u64,
    faults: u64,
    log: MetricsLog,
}

pub struct Simulation {
    kernel: Kernel<SimEvent>,
    pub state: SimState,
}

fn topic(ns: &str, name: &str) -> Topic {
    Topic::new(ns, name)
}

impl Simulation {
    pub fn new(spec: ScenarioSpec, options: RunOptions) -> Result<Simulation, super::ScenarioError> {
        spec.validate()?;
        let truth = load_world(&spec.world).map_err(|e| super::ScenarioError::Setup(e.to_string()))?;
        let mut kernel: Kernel<SimEvent> = Kernel::new(spec.seed);
        let net_rng = kernel.fork_rng("net").expect("fresh label");
        let merge_rng = kernel.fork_rng("lander/merge").expect("fresh label");

        let mut comms = spec.comms.clone();
        comms.gateway.host = spec.lander.name.clone();
        comms.gateway.remote = spec.ground_station.name.clone();
        let mut net = Network::new(spec.net.clone(), comms, net_rng);
        let setup = |e: crate::meshnet::MeshError| super::ScenarioError::Setup(e.to_string());
        let lander_node = net.add_node(&spec.lander.name, Some(Vec2::new(spec.lander.x, spec.lander.y))).map_err(setup)?;
        let gs_node = net.add_node(&spec.ground_station.name, None).map_err(setup)?;
        let g = &spec.ground_station;
        net.add_fixed_link(lander_node, gs_node, g.rate_bps, g.frame_error, g.delay_s);

        let mut rovers = Vec::new();
        for r in &spec.rovers {
            let node = net.add_node(&r.name, Some(Vec2::new(r.x, r.y))).map_err(setup)?;
            let mut config = spec.rover.clone();
            if let Some(v) = r.v_max {
                config.v_max = v;
            }
            let pose = Pose2::new(r.x, r.y, r.theta);
            let mut rover = Rover::new(&r.name, pose, config.clone(), spec.seed);
            let _ = rover.set_headlights(r.headlights);
            let mut follower = spec.autonomy.follower.clone();
            follower.v_max = follower.v_max.min(config.v_max);
            follower.omega_max = follower.omega_max.min(config.omega_max);
            let res = spec.world.resolution_m;
            let span = Vec2::new(config.scan.max_range + 1.0, config.scan.max_range + 1.0);
            let map = OccupancyGrid::covering(pose.position() - span, pose.position() + span, res);
            net.claim_namespace(node, &r.name);
            for t in ["odom", "status", "map", "nav_status", "cmd_ack"] {
                net.advertise(node, &topic(&r.name, t));
            }
            for t in ROVER_TOPICS {
                net.subscribe(node, Pattern::Exact(topic(&r.name, t)));
            }
            rovers.push(RoverAgent {
                name: r.name.clone(),
                node,
                rover,
                map,
                nav: Navigator::new(spec.autonomy.planner.clone(), follower),
                teleop: None,
                blocked: false,
                map_dirty: false,
                nav_state: NavState::Idle,
                odometer: 0.0,
            });
        }
        net.claim_namespace(lander_node, GLOBAL_NS);
        net.advertise(lander_node, &topic(GLOBAL_NS, "merged_map"));
        net.advertise(lander_node, &topic(GLOBAL_NS, "merge_status"));
        net.subscribe(lander_node, Pattern::parse("*/map").expect("valid"));
        for p in GS_TOPICS.iter().copied().chain(["global/merged_map", "global/merge_status"]) {
            net.subscribe(gs_node, Pattern::parse(p).expect("valid"));
        }

        let mut by_node = vec![None; net.mesh.node_count()];
        for (i, r) in rovers.iter().enumerate() {
            by_node[r.node] = Some(i);
        }
        let mut gs = GroundStation::new(spec.ground_station.operator.clone());
        gs.set_monitoring(options.monitoring);

        let header = json!({
            "seed": spec.seed,
            "options": options,
            "spec": spec,
        });
        let state = SimState {
            truth,
            net,
            gs,
            gs_node,
            rovers,
            by_node,
            lander: Lander { node: lander_node, ..Default::default() },
            merge_rng,
            routes: BTreeMap::new(),
            period: Period::default(),
            refusals: 0,
            faults: 0,
            log: MetricsLog::new(header),
            spec,
            options,
        };
        let mut sim = Simulation { kernel, state };
        sim.start();
        Ok(sim)
    }

    fn start(&mut self) {
        let k = &mut self.kernel;
        let s = &mut self.state;
        s.net.start(k);
        for ev in &s.spec.events {
            if let TimedEvent::Blackout { at, duration_s, a, b } = ev {
                let b = Blackout { start: *at, end: at + duration_s, links: LinkSelector::new(a, b) };
                s.net.mesh.add_blackout(k, b);
            }
        }
        let t = s.spec.telemetry.clone();
        let mut out = Vec::new();
        for (i, spec) in s.spec.rovers.iter().enumerate() {
            if !spec.powered {
                s.rovers[i].rover.shutdown();
                s.net.set_powered(k, s.rovers[i].node, false, &mut out);
            }
            let phase = 0.003 * i as f64;
            k.schedule_in(phase, "rover", SimEvent::Control(i));
            k.schedule_in(phase + 0.001, "rover", SimEvent::Sense(i));
            k.schedule_in(phase + 0.5, "rover", SimEvent::Status(i));
            k.schedule_in(phase + t.map_period_s, "rover", SimEvent::MapPublish(i));
        }
        k.schedule_in(s.spec.lander.merge_period_s, "lander", SimEvent::Merge);
        k.schedule_in(0.002, "gs", SimEvent::GsRefresh);
        k.schedule_in(t.metrics_period_s, "metrics", SimEvent::Metrics);
        for (i, ev) in s.spec.events.iter().enumerate() {
            if !matches!(ev, TimedEvent::Blackout { .. }) {
                k.schedule(ev.at(), "script", SimEvent::Script(i)).expect("validated time");
            }
        }
        s.pump(k, out);
    }

    pub fn now(&self) -> f64 {
        self.kernel.now_secs()
    }

    pub fn duration(&self) -> f64 {
        self.state.spec.duration_s
    }

    pub fn done(&self) -> bool {
        self.now() >= self.duration() - 1e-9
    }

    /// Runs every event up to `t`, capped at the scenario duration.
    pub fn advance(&mut self, t: f64) {
        let t = t.min(self.state.spec.duration_s);
        let state = &mut self.state;
        self.kernel.run_until(t, |k, f| state.handle(k, f));
    }

    /// Applies operator input at the current time, recording it in the log.
    pub fn apply_operator(&mut self, cmd: &ClientCommand) -> Result<(), Refusal> {
        let now = self.now();
        let s = &mut self.state;
        s.log.push("operator", json!({"t": now, "command": cmd}));
        match cmd {
            ClientCommand::Select { name } => {
                s.gs.select_robot(name.as_deref(), now);
                Ok(())
            }
            other => {
                let c = other.rover_command().expect("not a selection");
                s.gs_send(&mut self.kernel, &c, None)
            }
        }
    }

    pub fn snapshot(&self, paused: bool, realtime_factor: f64) -> Snapshot {
        let s = &self.state;
        let mut snap = Snapshot::capture(&s.gs, self.now(), paused, realtime_factor);
        if s.options.omniscient {
            for r in &s.rovers {
                if let Some(t) = snap.rovers.get_mut(&r.name) {
                    t.truth = Some(r.rover.true_pose());
                }
            }
        }
        snap
    }

    /// Runs to the end and seals the log.
    pub fn run(mut self) -> MetricsLog {
        let end = self.duration();
        self.advance(end);
        self.finish()
    }

    pub fn finish(mut self) -> MetricsLog {
        let now = self.now();
        let summary = self.state.summary(now);
        self.state.log.finish(summary);
        self.state.log
    }

    pub fn log(&self) -> &MetricsLog {
        &self.state.log
    }

    pub fn coverage(&self) -> f64 {
        self.state.coverage()
    }

    pub fn true_pose(&self, rover: &str) -> Option<Pose2> {
        self.state.rovers.iter().find(|r| r.name == rover).map(|r| r.rover.true_pose())
    }

    pub fn merged_map(&self) -> Option<&MergedMap> {
        self.state.lander.merged.as_ref()
    }

    /// The latest map the lander holds from `rover`, in the rover's frame.
    pub fn lander_map(&self, rover: &str) -> Option<&OccupancyGrid> {
        self.state.lander.maps.get(rover)
    }

    pub fn kernel_digest(&self) -> String {
        self.kernel.log().digest()
    }
}

impl SimState {
    fn handle(&mut self, k: &mut Kernel<SimEvent>, f: Fired<SimEvent>) {
        let now = f.at.as_secs();
        match f.payload {
            SimEvent::Net(ev) => {
                let out = self.net.handle(k, ev);
                self.pump(k, out);
            }
            SimEvent::Control(i) => self.control(k, i, now),
            SimEvent::Sense(i) => self.sense(k, i),
            SimEvent::Status(i) => self.status(k, i),
            SimEvent::MapPublish(i) => self.map_publish(k, i),
            SimEvent::Wake(i) => {
                if self.rovers[i].rover.wake(now) {
                    let mut out = Vec::new();
                    self.net.set_powered(k, self.rovers[i].node, true, &mut out);
                    self.pump(k, out);
                }
            }
            SimEvent::Merge => {
                k.schedule_in(self.spec.lander.merge_period_s, "lander", SimEvent::Merge);
                self.merge_cycle(k, now);
            }
            SimEvent::GsRefresh => {
                k.schedule_in(self.spec.telemetry.gs_refresh_s, "gs", SimEvent::GsRefresh);
                self.gs_refresh(now);
            }
            SimEvent::Metrics => {
                k.schedule_in(self.spec.telemetry.metrics_period_s, "metrics", SimEvent::Metrics);
                let rec = self.metrics_record(now);
                self.log.push("metrics", rec);
            }
            SimEvent::Script(i) => self.script(k, i, now),
            SimEvent::TeleopTick { script, until } => self.teleop_tick(k, script, until, now),
            SimEvent::RouteLeg { script, leg } => self.route_leg(k, script, leg, now),
        }
    }

    /// Processes comms outputs, including whatever their handlers publish.
    fn pump(&mut self, k: &mut Kernel<SimEvent>, first: Vec<CommsOutput>) {
        let mut queue: VecDeque<CommsOutput> = first.into();
        while let Some(o) = queue.pop_front() {
            let mut more = Vec::new();
            match o {
                CommsOutput::Delivery { node, envelope, at } => {
                    self.period.deliveries += 1;
                    let lat = at - envelope.sent_at;
                    self.period.latency_sum += lat;
                    self.period.latency_max = self.period.latency_max.max(lat);
                    if node == self.gs_node {
                        self.gs_delivery(k, &envelope, at, &mut more);
                    } else if node == self.lander.node {
                        self.lander_delivery(&envelope);
                    } else if let Some(i) = self.by_node.get(node).copied().flatten() {
                        self.rover_delivery(k, i, &envelope, at, &mut more);
                    }
                }
                CommsOutput::Fault { node, fault, at } => {
                    self.period.faults += 1;
                    self.faults += 1;
                    log::debug!("{at:.3} fault at {}: {fault:?}", self.net.mesh.name(node));
                }
            }
            queue.extend(more);
        }
    }

    fn publish(
        &mut self,
        k: &mut Kernel<SimEvent>,
        node: NodeId,
        t: &Topic,
        payload: Payload,
        qos: Qos,
        out: &mut Vec<CommsOutput>,
    ) -> Option<Arc<Envelope>> {
        self.net.publish(k, node, t, payload, qos, out).ok()
    }

    // Rovers.

    fn control(&mut self, k: &mut Kernel<SimEvent>, i: usize, now: f64) {
        let dt = 1.0 / self.spec.telemetry.control_hz;
        k.schedule_in(dt, "rover", SimEvent::Control(i));
        let r = &mut self.rovers[i];
        if !r.rover.powered() {
            return;
        }
        if r.teleop.is_some_and(|(_, _, until)| now > until + 1e-9) {
            r.teleop = None;
        }
        let (cmd, events) = match r.teleop {
            Some((v, w, _)) => ((v, w), Vec::new()),
            None if r.nav.active() => r.nav.tick(&r.map, r.rover.odom_pose(), now),
            None => ((0.0, 0.0), Vec::new()),
        };
        let outcome = r.rover.apply_drive(cmd, dt, Some(&self.truth)).expect("powered");
        r.blocked = outcome.blocked;
        r.odometer += outcome.distance;
        let node = r.node;
        let pose = r.rover.odom_pose();
        let (v, w) = r.rover.twist();
        let name = r.name.clone();
        self.net.mesh.set_position(node, r.rover.true_pose().position());
        let mut out = Vec::new();
        self.nav_events(k, i, &events, false, &mut out);
        self.publish(k, node, &topic(&name, "odom"), Payload::Odom { pose, v, w }, Qos::BestEffort, &mut out);
        self.pump(k, out);
    }

    fn sense(&mut self, k: &mut Kernel<SimEvent>, i: usize) {
        k.schedule_in(self.spec.telemetry.scan_period_s, "rover", SimEvent::Sense(i));
        let r = &mut self.rovers[i];
        let Some(scan) = r.rover.sense_scan(&self.truth) else { return };
        let pose = r.rover.odom_pose();
        r.map.ensure_contains(pose.position(), scan.max_range + 1.0);
        r.map.integrate_scan(pose, &scan);
        r.map_dirty = true;
    }

    fn status(&mut self, k: &mut Kernel<SimEvent>, i: usize) {
        k.schedule_in(self.spec.telemetry.status_period_s, "rover", SimEvent::Status(i));
        let r = &self.rovers[i];
        if !r.rover.powered() {
            return;
        }
        let st = RoverStatus {
            headlights: r.rover.state().headlights,
            odometry_degraded: r.rover.odometry_degraded(),
            drift_m: r.rover.drift(),
            autonomy_enabled: r.nav.enabled,
            blocked: r.blocked,
        };
        let (node, t) = (r.node, topic(&r.name, "status"));
        let mut out = Vec::new();
        self.publish(k, node, &t, Payload::Status(st), Qos::BestEffort, &mut out);
        self.pump(k, out);
    }

    fn map_publish(&mut self, k: &mut Kernel<SimEvent>, i: usize) {
        k.schedule_in(self.spec.telemetry.map_period_s, "rover", SimEvent::MapPublish(i));
        let r = &mut self.rovers[i];
        if !r.rover.powered() || !r.map_dirty {
            return;
        }
        r.map_dirty = false;
        let data = Arc::new(wire::encode(&r.map));
        let (node, t) = (r.node, topic(&r.name, "map"));
        let mut out = Vec::new();
        self.publish(k, node, &t, Payload::Map { data }, Qos::Reliable, &mut out);
        self.pump(k, out);
    }

    fn set_nav_state(
        &mut self,
        k: &mut Kernel<SimEvent>,
        i: usize,
        state: NavState,
        detail: String,
        force: bool,
        out: &mut Vec<CommsOutput>,
    ) {
        let r = &mut self.rovers[i];
        if r.nav_state == state && !force {
            return;
        }
        r.nav_state = state.clone();
        let (node, t) = (r.node, topic(&r.name, "nav_status"));
        self.publish(k, node, &t, Payload::NavStatus { state, detail }, Qos::Reliable, out);
    }

    fn nav_events(&mut self, k: &mut Kernel<SimEvent>, i: usize, events: &[NavEvent], new_goal: bool, out: &mut Vec<CommsOutput>) {
        for e in events {
            match e {
                NavEvent::Following { length_m } => {
                    self.set_nav_state(k, i, NavState::Active, format!("path {length_m:.1} m"), new_goal, out)
                }
                NavEvent::GoalReached => self.set_nav_state(k, i, NavState::Reached, String::new(), true, out),
                NavEvent::NoPath => self.set_nav_state(k, i, NavState::Failed, "no path".into(), true, out),
                NavEvent::Planning | NavEvent::Replan => {}
            }
        }
    }

    fn do_reboot(&mut self, k: &mut Kernel<SimEvent>, i: usize, now: f64, out: &mut Vec<CommsOutput>) {
        let r = &mut self.rovers[i];
        if let Ok(until) = r.rover.reboot(now) {
            r.teleop = None;
            r.nav.cancel();
            r.nav_state = NavState::Idle;
            let node = r.node;
            self.net.set_powered(k, node, false, out);
            k.schedule(until, "rover", SimEvent::Wake(i)).expect("future");
        }
    }

    fn rover_delivery(&mut self, k: &mut Kernel<SimEvent>, i: usize, env: &Envelope, at: f64, out: &mut Vec<CommsOutput>) {
        if !self.rovers[i].rover.powered() {
            return;
        }
        let timeout = self.spec.telemetry.teleop_timeout_s;
        let ack = |s: &mut SimState, k: &mut Kernel<SimEvent>, out: &mut Vec<CommsOutput>| {
            let r = &s.rovers[i];
            let (node, t) = (r.node, topic(&r.name, "cmd_ack"));
            let p = Payload::CmdAck { command: env.topic.name.clone(), seq: env.seq };
            s.publish(k, node, &t, p, Qos::Reliable, out);
        };
        match &env.payload {
            Payload::CmdVel { v, w } => self.rovers[i].teleop = Some((*v, *w, at + timeout)),
            Payload::Lights { on } => {
                let _ = self.rovers[i].rover.set_headlights(*on);
                ack(self, k, out);
            }
            Payload::ResetOdom { pose } => {
                let _ = self.rovers[i].rover.reset_odometry(*pose);
                ack(self, k, out);
            }
            Payload::Reboot => {
                ack(self, k, out);
                self.do_reboot(k, i, at, out);
            }
            Payload::NavGoal { x, y } => {
                ack(self, k, out);
                let r = &mut self.rovers[i];
                if !r.nav.enabled {
                    self.set_nav_state(k, i, NavState::Rejected, "autonomy disabled".into(), true, out);
                } else {
                    let events = r.nav.set_goal(Vec2::new(*x, *y), &r.map, r.rover.odom_pose(), at);
                    self.nav_events(k, i, &events, true, out);
                }
            }
            Payload::CancelNav => {
                ack(self, k, out);
                self.rovers[i].nav.cancel();
                self.set_nav_state(k, i, NavState::Idle, "cancelled".into(), true, out);
            }
            _ => {}
        }
    }

    // Lander.

    fn lander_delivery(&mut self, env: &Envelope) {
        if let Payload::Map { data } = &env.payload {
            match wire::decode(data) {
                Ok(g) => {
                    self.lander.maps.insert(env.topic.namespace.clone(), g);
                    self.lander.dirty = true;
                }
                Err(e) => log::warn!("undecodable map from {}: {e}", env.topic.namespace),
            }
        }
    }

    fn merge_cycle(&mut self, k: &mut Kernel<SimEvent>, now: f64) {
        if !self.lander.dirty {
            return;
        }
        self.lander.dirty = false;
        self.lander.cycles += 1;
        let order: Vec<String> =
            self.spec.rovers.iter().map(|r| r.name.clone()).filter(|n| self.lander.maps.contains_key(n)).collect();
        let anchor = self.spec.rovers[0].name.clone();
        let l = &mut self.lander;
        if l.maps.contains_key(&anchor) {
            l.accepted.insert(anchor.clone(), Pose2::IDENTITY);
            l.reports.insert(
                anchor.clone(),
                MergeReport {
                    rover: anchor.clone(),
                    accepted: true,
                    detail: "anchor".into(),
                    transform: Some(Pose2::IDENTITY),
                    overlap_ratio: None,
                },
            );
        }
        let every = self.spec.lander.reregister_cycles.max(1);
        for name in order.iter().filter(|n| **n != anchor) {
            let since = l.since_registered.entry(name.clone()).or_insert(0);
            *since += 1;
            if l.accepted.contains_key(name) && *since < every {
                continue;
            }
            *since = 0;
            let others: Vec<LocalMap<'_>> = order
                .iter()
                .filter(|o| *o != name)
                .filter_map(|o| l.accepted.get(o).map(|t| LocalMap { name: o.clone(), grid: &l.maps[o], transform: Some(*t) }))
                .collect();
            let Some(reference) = merge(&others).filter(|_| !others.is_empty()) else {
                l.reports.insert(
                    name.clone(),
                    MergeReport {
                        rover: name.clone(),
                        accepted: false,
                        detail: "no anchored map to register against".into(),
                        transform: None,
                        overlap_ratio: None,
                    },
                );
                continue;
            };
            let res = match_and_estimate(&reference.grid, &l.maps[name], &self.spec.lander.merge, &mut self.merge_rng);
            let report = match res {
                Ok(t) => {
                    l.accepted.insert(name.clone(), t.transform);
                    MergeReport {
                        rover: name.clone(),
                        accepted: true,
                        detail: format!("{} inliers", t.inlier_count),
                        transform: Some(t.transform),
                        overlap_ratio: Some(t.overlap_ratio),
                    }
                }
                Err(e) => {
                    log::debug!("t={now}: {name} not registered: {e}");
                    MergeReport {
                    rover: name.clone(),
                    accepted: l.accepted.contains_key(name),
                    detail: e.to_string(),
                    transform: l.accepted.get(name).copied(),
                    overlap_ratio: None,
                }
                }
            };
            l.reports.insert(name.clone(), report);
        }
        let locals: Vec<LocalMap<'_>> = order
            .iter()
            .map(|n| LocalMap { name: n.clone(), grid: &l.maps[n], transform: l.accepted.get(n).copied() })
            .collect();
        let merged = merge(&locals);
        let reports: Vec<MergeReport> = order.iter().filter_map(|n| l.reports.get(n).cloned()).collect();
        let Some(merged) = merged else { return };
        let data = Arc::new(wire::encode(&merged.grid));
        let placements = merged.placements.clone();
        l.merged = Some(merged);
        let node = l.node;
        let mut out = Vec::new();
        self.publish(k, node, &topic(GLOBAL_NS, "merged_map"), Payload::MergedMap { data, placements }, Qos::Reliable, &mut out);
        self.publish(k, node, &topic(GLOBAL_NS, "merge_status"), Payload::MergeStatus { reports }, Qos::Reliable, &mut out);
        self.pump(k, out);
    }

    // Ground station.

    fn gs_refresh(&mut self, now: f64) {
        let entries = self.net.namespaces_seen_by(self.gs_node, now);
        self.gs.refresh_namespaces(entries);
        for r in &self.rovers {
            let path = self
                .net
                .mesh
                .route(r.node, self.lander.node, now)
                .map(|p| {
                    let mut names: Vec<String> = p.iter().map(|n| self.net.mesh.name(*n).to_string()).collect();
                    names.push(self.spec.ground_station.name.clone());
                    names
                })
                .unwrap_or_default();
            if self.gs.fleet.rovers.contains_key(&r.name) || !path.is_empty() {
                self.gs.set_link_path(&r.name, path);
            }
        }
    }

    fn gs_delivery(&mut self, k: &mut Kernel<SimEvent>, env: &Envelope, at: f64, _out: &mut Vec<CommsOutput>) {
        self.gs.observe(env, at);
        if let Payload::NavStatus { state, .. } = &env.payload {
            if matches!(state, NavState::Reached | NavState::Failed | NavState::Rejected) {
                let ns = env.topic.namespace.clone();
                let due: Vec<usize> = self
                    .routes
                    .iter()
                    .filter(|(_, r)| r.rover == ns && r.awaiting && env.sent_at >= r.sent_at)
                    .map(|(i, _)| *i)
                    .collect();
                for s in due {
                    let r = self.routes.get_mut(&s).expect("present");
                    r.leg += 1;
                    self.send_leg(k, s, at);
                }
            }
        }
    }

    /// Selects `rover` if given, then sends `cmd` from the ground station.
    fn gs_send(&mut self, k: &mut Kernel<SimEvent>, cmd: &Command, rover: Option<&str>) -> Result<(), Refusal> {
        let now = k.now_secs();
        if let Some(r) = rover {
            if self.gs.selection() != Some(r) {
                self.gs.select_robot(Some(r), now);
            }
        }
        match self.gs.prepare(cmd, now) {
            Ok(o) => {
                let mut out = Vec::new();
                let gs_node = self.gs_node;
                if let Some(env) = self.publish(k, gs_node, &o.topic, o.payload, o.qos, &mut out) {
                    self.gs.sent(&env, now);
                }
                self.pump(k, out);
                Ok(())
            }
            Err(e) => {
                self.refusals += 1;
                if !matches!(e, Refusal::RateLimited | Refusal::FrameUnknown { .. }) {
                    self.gs.note(now, format!("refused: {e}"));
                }
                Err(e)
            }
        }
    }

    fn rover_index(&self, name: &str) -> usize {
        self.rovers.iter().position(|r| r.name == name).expect("validated rover name")
    }

    fn script(&mut self, k: &mut Kernel<SimEvent>, idx: usize, now: f64) {
        let ev = self.spec.events[idx].clone();
        let mut out = Vec::new();
        match ev {
            TimedEvent::Blackout { .. } => {}
            TimedEvent::ShutdownRover { rover, .. } => {
                let i = self.rover_index(&rover);
                let r = &mut self.rovers[i];
                r.rover.shutdown();
                r.nav.cancel();
                r.teleop = None;
                let node = r.node;
                self.net.set_powered(k, node, false, &mut out);
                self.gs.note(now, format!("{rover} shut down"));
            }
            TimedEvent::PowerOnRover { rover, .. } => {
                let i = self.rover_index(&rover);
                if self.rovers[i].rover.power_on() {
                    let node = self.rovers[i].node;
                    self.net.set_powered(k, node, true, &mut out);
                }
            }
            TimedEvent::DisableAutonomy { rover, .. } => {
                let i = self.rover_index(&rover);
                let r = &mut self.rovers[i];
                r.nav.enabled = false;
                r.nav.cancel();
                r.nav_state = NavState::Idle;
            }
            TimedEvent::RebootRover { rover, .. } => {
                let i = self.rover_index(&rover);
                self.do_reboot(k, i, now, &mut out);
            }
            TimedEvent::ScriptGoal { rover, x, y, .. } => {
                let _ = self.gs_send(k, &Command::NavGoal { x, y }, Some(&rover));
            }
            TimedEvent::ScriptRoute { rover, waypoints, leg_timeout_s, .. } => {
                self.routes.insert(
                    idx,
                    Route { rover, waypoints, timeout: leg_timeout_s, leg: 0, awaiting: false, leg_started: now, sent_at: now },
                );
                self.send_leg(k, idx, now);
            }
            TimedEvent::ScriptTeleop { duration_s, .. } => {
                self.teleop_tick(k, idx, now + duration_s, now);
            }
            TimedEvent::ScriptLights { rover, on, .. } => {
                let _ = self.gs_send(k, &Command::Lights { on }, Some(&rover));
            }
        }
        self.pump(k, out);
    }

    fn teleop_tick(&mut self, k: &mut Kernel<SimEvent>, script: usize, until: f64, now: f64) {
        let TimedEvent::ScriptTeleop { rover, v, w, .. } = self.spec.events[script].clone() else { return };
        if now < until - 1e-9 {
            let _ = self.gs_send(k, &Command::Teleop { v, w }, Some(&rover));
            k.schedule_in(1.0 / self.spec.telemetry.teleop_hz, "script", SimEvent::TeleopTick { script, until });
        } else {
            let _ = self.gs_send(k, &Command::Teleop { v: 0.0, w: 0.0 }, Some(&rover));
        }
    }

    fn send_leg(&mut self, k: &mut Kernel<SimEvent>, script: usize, now: f64) {
        let Some(r) = self.routes.get_mut(&script) else { return };
        if r.leg >= r.waypoints.len() {
            self.routes.remove(&script);
            return;
        }
        if !r.awaiting && r.leg_started > now {
            r.leg_started = now;
        }
        let [x, y] = r.waypoints[r.leg];
        let rover = r.rover.clone();
        let leg = r.leg;
        let sent = self.gs_send(k, &Command::NavGoal { x, y }, Some(&rover));
        let r = self.routes.get_mut(&script).expect("present");
        match sent {
            Ok(()) => {
                r.awaiting = true;
                r.sent_at = now;
                r.leg_started = now;
                k.schedule_in(r.timeout, "script", SimEvent::RouteLeg { script, leg });
            }
            Err(_) => {
                if r.awaiting {
                    r.awaiting = false;
                    r.leg_started = now;
                }
                k.schedule_in(SCRIPT_RETRY_S, "script", SimEvent::RouteLeg { script, leg });
            }
        }
    }

    fn route_leg(&mut self, k: &mut Kernel<SimEvent>, script: usize, leg: usize, now: f64) {
        let Some(r) = self.routes.get_mut(&script) else { return };
        if r.leg != leg {
            return;
        }
        if r.awaiting || now - r.leg_started >= r.timeout - 1e-9 {
            r.leg += 1;
            r.awaiting = false;
            r.leg_started = now;
        }
        self.send_leg(k, script, now);
    }

    // Metrics.

    fn coverage(&self) -> f64 {
        let eps = self.spec.lander.merge.known_eps;
        self.lander.merged.as_ref().and_then(|m| coverage_fraction(&m.grid, &self.truth, eps).ok()).unwrap_or(0.0)
    }

    fn bytes_by_namespace(&self) -> BTreeMap<String, u64> {
        let wire = self.net.mesh.wire();
        let mut out = BTreeMap::new();
        for n in 0..self.net.mesh.node_count() {
            let ns = if n == self.lander.node { GLOBAL_NS.to_string() } else { self.net.mesh.name(n).to_string() };
            *out.entry(ns).or_insert(0) += wire.by_origin(n);
        }
        out
    }

    fn metrics_record(&mut self, now: f64) -> Value {
        let p = std::mem::take(&mut self.period);
        let mesh = self.net.mesh.stats();
        let rovers: BTreeMap<String, Value> = self
            .rovers
            .iter()
            .map(|r| {
                let v = json!({
                    "powered": r.rover.powered(),
                    "distance_m": r.odometer,
                    "odom_error_m": r.rover.odom_error(),
                    "map_cells_known": r.map.known_count(self.spec.lander.merge.known_eps),
                    "merge_accepted": self.lander.accepted.contains_key(&r.name),
                });
                (r.name.clone(), v)
            })
            .collect();
        json!({
            "t": now,
            "coverage": self.coverage(),
            "wire_bytes": self.net.mesh.wire().total(),
            "bytes_by_namespace": self.bytes_by_namespace(),
            "route_discoveries": mesh.discoveries,
            "route_table_updates": mesh.table_updates,
            "mesh_dropped": mesh.dropped,
            "deliveries": p.deliveries,
            "latency_mean_s": if p.deliveries > 0 { p.latency_sum / p.deliveries as f64 } else { 0.0 },
            "latency_max_s": p.latency_max,
            "faults": p.faults,
            "gateway_peak_bytes": self.net.gateway_buffer().peak_bytes,
            "reliable_backlog": self.net.reliable_backlog(),
            "commands_sent": self.gs.commands_sent(),
            "refusals": self.refusals,
            "merge_cycles": self.lander.cycles,
            "rovers": rovers,
        })
    }

    fn summary(&self, now: f64) -> Value {
        let rtt = self.gs.rtt_samples();
        json!({
            "t": now,
            "coverage": self.coverage(),
            "wire_bytes": self.net.mesh.wire().total(),
            "bytes_by_namespace": self.bytes_by_namespace(),
            "mesh": self.net.mesh.stats(),
            "comms": self.net.stats(),
            "commands_sent": self.gs.commands_sent(),
            "refusals": self.refusals,
            "faults": self.faults,
            "rtt_samples": rtt.len(),
            "rtt_mean_s": if rtt.is_empty() { 0.0 } else { rtt.iter().sum::<f64>() / rtt.len() as f64 },
            "merge_cycles": self.lander.cycles,
            "merge_accepted": self.lander.accepted.keys().collect::<Vec<_>>(),
        })
    }
}
