//! Operator backend: what the ground station knows about the fleet, which
//! rover commands go to, and the passive bandwidth monitor.
//!
//! Everything here is built from envelopes the ground station node
//! received. Nothing reads simulator truth.

pub mod protocol;
pub mod server;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{Envelope, MergeReport, NamespaceEntry, NavState, Payload, Qos, RoverStatus, Topic};
use crate::geometry::{Pose2, Vec2};
use crate::mapping::Placement;

/// Namespace used for lander products.
pub const GLOBAL_NS: &str = "global";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    Teleop { v: f64, w: f64 },
    Lights { on: bool },
    ResetOdom { x: f64, y: f64, theta: f64 },
    Reboot,
    /// Goal in the merged-map frame.
    NavGoal { x: f64, y: f64 },
    CancelNav,
}

impl Command {
    pub fn topic_name(&self) -> &'static str {
        match self {
            Command::Teleop { .. } => "cmd_vel",
            Command::Lights { .. } => "lights",
            Command::ResetOdom { .. } => "reset_odom",
            Command::Reboot => "reboot",
            Command::NavGoal { .. } => "nav_goal",
            Command::CancelNav => "cancel_nav",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Refusal {
    #[error("no rover selected")]
    NoSelection,
    #[error("selected namespace {name} is not live")]
    StaleSelection { name: String },
    #[error("teleop above the rate limit")]
    RateLimited,
    #[error("no accepted merge transform for {name}")]
    FrameUnknown { name: String },
}

/// A command ready to publish.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub topic: Topic,
    pub payload: Payload,
    pub qos: Qos,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoverView {
    pub last_seen: f64,
    pub odom: Option<Pose2>,
    pub odom_at: Option<f64>,
    pub status: Option<RoverStatus>,
    pub nav_state: Option<NavState>,
    pub nav_detail: String,
    pub map_version: u64,
    #[serde(skip)]
    pub map: Option<Arc<Vec<u8>>>,
    pub placement: Option<Placement>,
    /// Node names from the rover to the ground station, as the mesh reports it.
    pub link_path: Vec<String>,
    pub merge: Option<MergeReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetView {
    pub namespaces: Vec<NamespaceEntry>,
    pub rovers: BTreeMap<String, RoverView>,
    pub merged_version: u64,
    #[serde(skip)]
    pub merged_map: Option<Arc<Vec<u8>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickerEvent {
    pub t: f64,
    pub text: String,
}

/// Per-namespace byte rates over a window, from envelopes seen at the
/// ground station.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub window_s: f64,
    /// namespace -> bytes/s received.
    pub inbound: BTreeMap<String, f64>,
    /// namespace -> bytes/s of commands sent.
    pub outbound: BTreeMap<String, f64>,
    /// topic path -> bytes/s received.
    pub by_topic: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundStationParams {
    pub teleop_max_hz: f64,
    /// Longest window a bandwidth report can cover.
    pub monitor_horizon_s: f64,
    pub ticker_len: usize,
    /// Per-message overhead counted with each observed envelope.
    pub overhead_bytes: usize,
}

impl Default for GroundStationParams {
    fn default() -> Self {
        GroundStationParams { teleop_max_hz: 10.0, monitor_horizon_s: 60.0, ticker_len: 50, overhead_bytes: 64 }
    }
}

#[derive(Clone, Debug)]
struct Sample {
    t: f64,
    topic: Topic,
    inbound: bool,
    bytes: usize,
}

pub struct GroundStation {
    pub params: GroundStationParams,
    pub fleet: FleetView,
    selection: Option<String>,
    live: BTreeSet<String>,
    last_teleop: BTreeMap<String, f64>,
    monitor: bool,
    samples: VecDeque<Sample>,
    ticker: VecDeque<TickerEvent>,
    /// (namespace, command topic, seq) -> sent at.
    pending: BTreeMap<(String, String, u64), f64>,
    rtt: Vec<f64>,
    commands_sent: u64,
}

impl GroundStation {
    pub fn new(params: GroundStationParams) -> GroundStation {
        GroundStation {
            params,
            fleet: FleetView::default(),
            selection: None,
            live: BTreeSet::new(),
            last_teleop: BTreeMap::new(),
            monitor: true,
            samples: VecDeque::new(),
            ticker: VecDeque::new(),
            pending: BTreeMap::new(),
            rtt: Vec::new(),
            commands_sent: 0,
        }
    }

    pub fn selection(&self) -> Option<&str> {
        self.selection.as_deref()
    }

    /// Whether the current selection names a live namespace.
    pub fn selection_live(&self) -> bool {
        self.selection.as_ref().is_some_and(|s| self.live.contains(s))
    }

    pub fn commands_sent(&self) -> u64 {
        self.commands_sent
    }

    pub fn rtt_samples(&self) -> &[f64] {
        &self.rtt
    }

    pub fn ticker(&self) -> impl Iterator<Item = &TickerEvent> {
        self.ticker.iter()
    }

    pub fn set_monitoring(&mut self, on: bool) {
        self.monitor = on;
        if !on {
            self.samples.clear();
        }
    }

    pub fn monitoring(&self) -> bool {
        self.monitor
    }

    pub fn note(&mut self, t: f64, text: impl Into<String>) {
        self.ticker.push_back(TickerEvent { t, text: text.into() });
        while self.ticker.len() > self.params.ticker_len {
            self.ticker.pop_front();
        }
    }

    /// Replaces the namespace table with what discovery currently reports.
    pub fn refresh_namespaces(&mut self, entries: Vec<NamespaceEntry>) {
        self.live = entries.iter().filter(|e| e.alive).map(|e| e.namespace.clone()).collect();
        self.fleet.namespaces = entries;
    }

    pub fn set_link_path(&mut self, rover: &str, path: Vec<String>) {
        self.fleet.rovers.entry(rover.to_string()).or_default().link_path = path;
    }

    /// Unknown names are accepted but commands stay held until they go live.
    pub fn select_robot(&mut self, name: Option<&str>, now: f64) -> bool {
        self.selection = name.map(str::to_string);
        let live = self.selection_live();
        match name {
            Some(n) if !live => self.note(now, format!("selected {n}, not live")),
            Some(n) => self.note(now, format!("selected {n}")),
            None => self.note(now, "selection cleared"),
        }
        live
    }

    /// Turns an operator command into an envelope for the selected rover.
    pub fn prepare(&mut self, cmd: &Command, now: f64) -> Result<Outgoing, Refusal> {
        let Some(ns) = self.selection.clone() else {
            return Err(Refusal::NoSelection);
        };
        if !self.live.contains(&ns) {
            return Err(Refusal::StaleSelection { name: ns });
        }
        let topic = Topic::new(&ns, cmd.topic_name());
        let (payload, qos) = match *cmd {
            Command::Teleop { v, w } => {
                let min_gap = 1.0 / self.params.teleop_max_hz;
                if self.last_teleop.get(&ns).is_some_and(|t| now - t < min_gap - 1e-9) {
                    return Err(Refusal::RateLimited);
                }
                self.last_teleop.insert(ns.clone(), now);
                (Payload::CmdVel { v, w }, Qos::BestEffort)
            }
            Command::Lights { on } => (Payload::Lights { on }, Qos::Reliable),
            Command::ResetOdom { x, y, theta } => (Payload::ResetOdom { pose: Pose2::new(x, y, theta) }, Qos::Reliable),
            Command::Reboot => (Payload::Reboot, Qos::Reliable),
            Command::CancelNav => (Payload::CancelNav, Qos::Reliable),
            Command::NavGoal { x, y } => {
                let placement = self.fleet.rovers.get(&ns).and_then(|r| r.placement.clone());
                let Some(p) = placement.filter(|p| p.anchored) else {
                    self.note(now, format!("{ns}: frame_unknown"));
                    return Err(Refusal::FrameUnknown { name: ns });
                };
                let local = p.transform.inverse().apply(Vec2::new(x, y));
                (Payload::NavGoal { x: local.x, y: local.y }, Qos::Reliable)
            }
        };
        Ok(Outgoing { topic, payload, qos })
    }

    /// Records a command the simulator actually published.
    pub fn sent(&mut self, envelope: &Envelope, now: f64) {
        self.commands_sent += 1;
        if envelope.qos == Qos::Reliable {
            let key = (envelope.topic.namespace.clone(), envelope.topic.name.clone(), envelope.seq);
            self.pending.insert(key, now);
        }
        if self.monitor {
            self.sample(now, envelope, false);
        }
    }

    fn sample(&mut self, t: f64, env: &Envelope, inbound: bool) {
        let bytes = env.payload_bytes + self.params.overhead_bytes;
        self.samples.push_back(Sample { t, topic: env.topic.clone(), inbound, bytes });
        let horizon = self.params.monitor_horizon_s;
        while self.samples.front().is_some_and(|s| t - s.t > horizon) {
            self.samples.pop_front();
        }
    }

    /// Updates the fleet view from one delivered envelope.
    pub fn observe(&mut self, env: &Envelope, at: f64) {
        if self.monitor {
            self.sample(at, env, true);
        }
        let ns = env.topic.namespace.clone();
        if ns == GLOBAL_NS {
            match &env.payload {
                Payload::MergedMap { data, placements } => {
                    self.fleet.merged_version += 1;
                    self.fleet.merged_map = Some(data.clone());
                    for p in placements {
                        self.fleet.rovers.entry(p.name.clone()).or_default().placement = Some(p.clone());
                    }
                }
                Payload::MergeStatus { reports } => {
                    for r in reports {
                        if !r.accepted {
                            self.note(at, format!("merge {}: {}", r.rover, r.detail));
                        }
                        self.fleet.rovers.entry(r.rover.clone()).or_default().merge = Some(r.clone());
                    }
                }
                _ => {}
            }
            return;
        }
        let view = self.fleet.rovers.entry(ns.clone()).or_default();
        view.last_seen = view.last_seen.max(at);
        match &env.payload {
            Payload::Odom { pose, .. } => {
                view.odom = Some(*pose);
                view.odom_at = Some(at);
            }
            Payload::Status(s) => view.status = Some(s.clone()),
            Payload::Map { data } => {
                view.map_version += 1;
                view.map = Some(data.clone());
            }
            Payload::NavStatus { state, detail } => {
                view.nav_state = Some(state.clone());
                view.nav_detail = detail.clone();
                let text = format!("{ns}: nav {state:?} {detail}");
                self.note(at, text);
            }
            Payload::CmdAck { command, seq } => {
                if let Some(sent) = self.pending.remove(&(ns, command.clone(), *seq)) {
                    self.rtt.push(at - sent);
                }
            }
            _ => {}
        }
    }

    /// Rates over the last `window` seconds. Purely a read of local counters.
    pub fn bandwidth_report(&self, window: f64, now: f64) -> BandwidthReport {
        let window = window.clamp(1e-9, self.params.monitor_horizon_s);
        let mut r = BandwidthReport { window_s: window, ..Default::default() };
        for s in self.samples.iter().filter(|s| now - s.t <= window) {
            let rate = s.bytes as f64 / window;
            let side = if s.inbound { &mut r.inbound } else { &mut r.outbound };
            *side.entry(s.topic.namespace.clone()).or_insert(0.0) += rate;
            if s.inbound {
                *r.by_topic.entry(s.topic.path()).or_insert(0.0) += rate;
            }
        }
        r
    }
}
