//! Frame-level mesh simulation: per-node transmit queues, lossy hops with
//! bounded retries, on-demand routing and blackout windows.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::link::{airtime_plus, update_per, LinkState, NetParams};
use super::routing::{find_loop, flood, Discovery, Edge, RouteEntry, RoutingTable};
use crate::geometry::Vec2;
use crate::kernel::{Kernel, RngStream};

pub type NodeId = usize;

const TARGET: &str = "mesh";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is powered off")]
    PoweredOff(String),
    #[error("frame addressed to its own origin")]
    SelfAddressed,
    #[error("duplicate node name {0}")]
    DuplicateNode(String),
}

/// Where wire bytes are attributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireCategory {
    Payload,
    Overhead,
    Retransmission,
    Ack,
    Discovery,
    RouteControl,
}

impl WireCategory {
    pub const ALL: [WireCategory; 6] = [
        WireCategory::Payload,
        WireCategory::Overhead,
        WireCategory::Retransmission,
        WireCategory::Ack,
        WireCategory::Discovery,
        WireCategory::RouteControl,
    ];
}

/// What a frame carries, as far as accounting goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficClass {
    Data,
    /// End-to-end resend by the layer above.
    Retransmission,
    Ack,
    Discovery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dest {
    Node(NodeId),
    Broadcast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame<P> {
    pub id: u64,
    pub origin: NodeId,
    pub dest: Dest,
    pub payload_bytes: usize,
    pub overhead_bytes: usize,
    pub class: TrafficClass,
    pub body: P,
    pub created_at: f64,
}

impl<P> Frame<P> {
    pub fn bytes(&self) -> usize {
        self.payload_bytes + self.overhead_bytes
    }

    fn bits(&self) -> f64 {
        (self.bytes() * 8) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoRoute,
    LinkDown,
    RetryLimit,
    NodeDown,
}

#[derive(Clone, Debug)]
pub enum MeshOutput<P> {
    Delivered { frame: Frame<P>, to: NodeId, at: f64 },
    /// A unicast frame that will not arrive. Doubles as the NACK to its origin.
    Dropped { frame: Frame<P>, at_node: NodeId, reason: DropReason },
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeshEvent {
    TxDone { node: NodeId },
    Arrive { copy: u64, from: NodeId, to: NodeId, broadcast: bool },
    RouteReady { id: u64 },
    LinkSample,
    Blackout { index: usize, start: bool },
}

/// Link set matched by name; `*` matches any node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSelector {
    pub a: String,
    pub b: String,
}

impl LinkSelector {
    pub fn new(a: &str, b: &str) -> Self {
        LinkSelector { a: a.to_string(), b: b.to_string() }
    }

    fn matches(&self, x: &str, y: &str) -> bool {
        let m = |pat: &str, n: &str| pat == "*" || pat == n;
        (m(&self.a, x) && m(&self.b, y)) || (m(&self.a, y) && m(&self.b, x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blackout {
    pub start: f64,
    pub end: f64,
    pub links: LinkSelector,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeshStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub drops: BTreeMap<DropReason, u64>,
    pub discoveries: u64,
    pub table_updates: u64,
    pub loop_violations: u64,
    pub broadcasts_sent: u64,
}

/// Bytes put on the air, per origin node and category.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WireCounters {
    pub bytes: BTreeMap<(NodeId, WireCategory), u64>,
}

impl WireCounters {
    fn add(&mut self, origin: NodeId, cat: WireCategory, bytes: usize) {
        *self.bytes.entry((origin, cat)).or_insert(0) += bytes as u64;
    }

    pub fn total(&self) -> u64 {
        self.bytes.values().sum()
    }

    pub fn by_category(&self, cat: WireCategory) -> u64 {
        self.bytes.iter().filter(|((_, c), _)| *c == cat).map(|(_, b)| b).sum()
    }

    pub fn by_origin(&self, node: NodeId) -> u64 {
        self.bytes.iter().filter(|((n, _), _)| *n == node).map(|(_, b)| b).sum()
    }
}

struct Node {
    name: String,
    position: Option<Vec2>,
    powered: bool,
    seqnum: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Tx {
    Unicast(u64),
    Broadcast(u64),
}

enum Current {
    Unicast { id: u64, next: NodeId, success: bool },
    Broadcast { copy: u64, receivers: Vec<NodeId> },
}

#[derive(Default)]
struct Radio {
    queue: VecDeque<Tx>,
    current: Option<Current>,
}

struct PendingDiscovery {
    src: NodeId,
    dst: NodeId,
    result: Discovery,
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub struct Mesh<P> {
    pub params: NetParams,
    nodes: Vec<Node>,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    busy: BTreeMap<(NodeId, NodeId), f64>,
    blackout_depth: BTreeMap<(NodeId, NodeId), u32>,
    blackouts: Vec<Blackout>,
    tables: Vec<RoutingTable>,
    radios: Vec<Radio>,
    frames: BTreeMap<u64, Frame<P>>,
    copies: BTreeMap<u64, Frame<P>>,
    seen: BTreeSet<(u64, NodeId)>,
    pending: BTreeMap<(NodeId, NodeId), Vec<u64>>,
    discovering: BTreeSet<(NodeId, NodeId)>,
    discoveries: BTreeMap<u64, PendingDiscovery>,
    last_discovery: BTreeMap<(NodeId, NodeId), f64>,
    last_use: BTreeMap<(NodeId, NodeId), f64>,
    next_id: u64,
    next_copy: u64,
    next_discovery: u64,
    rng: RngStream,
    stats: MeshStats,
    wire: WireCounters,
    route_log: Option<Vec<String>>,
    started: bool,
}

impl<P: Clone> Mesh<P> {
    pub fn new(params: NetParams, rng: RngStream) -> Self {
        Mesh {
            params,
            nodes: Vec::new(),
            links: BTreeMap::new(),
            busy: BTreeMap::new(),
            blackout_depth: BTreeMap::new(),
            blackouts: Vec::new(),
            tables: Vec::new(),
            radios: Vec::new(),
            frames: BTreeMap::new(),
            copies: BTreeMap::new(),
            seen: BTreeSet::new(),
            pending: BTreeMap::new(),
            discovering: BTreeSet::new(),
            discoveries: BTreeMap::new(),
            last_discovery: BTreeMap::new(),
            last_use: BTreeMap::new(),
            next_id: 0,
            next_copy: 0,
            next_discovery: 0,
            rng,
            stats: MeshStats::default(),
            wire: WireCounters::default(),
            route_log: None,
            started: false,
        }
    }

    /// Adds a node. Nodes with a position get radio links to every other
    /// positioned node; the rest only talk over fixed links.
    pub fn add_node(&mut self, name: &str, position: Option<Vec2>) -> Result<NodeId, MeshError> {
        if self.node_id(name).is_some() {
            return Err(MeshError::DuplicateNode(name.to_string()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { name: name.to_string(), position, powered: true, seqnum: 0 });
        self.tables.push(RoutingTable::default());
        self.radios.push(Radio::default());
        if let Some(p) = position {
            for other in 0..id {
                if let Some(q) = self.nodes[other].position {
                    let l = LinkState::from_distance(other, id, p.dist(q), &self.params.curve);
                    self.links.insert((other, id), l);
                }
            }
        }
        Ok(id)
    }

    pub fn add_fixed_link(&mut self, a: NodeId, b: NodeId, rate_bps: f64, e_f: f64, extra_delay_s: f64) {
        let (x, y) = key(a, b);
        self.links.insert((x, y), LinkState::fixed(x, y, rate_bps, e_f, extra_delay_s));
    }

    pub fn enable_route_log(&mut self) {
        self.route_log.get_or_insert_with(Vec::new);
    }

    pub fn route_log(&self) -> &[String] {
        self.route_log.as_deref().unwrap_or(&[])
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn powered(&self, id: NodeId) -> bool {
        self.nodes[id].powered
    }

    pub fn position(&self, id: NodeId) -> Option<Vec2> {
        self.nodes[id].position
    }

    /// Moves a node. Link quality follows at the next sample.
    pub fn set_position(&mut self, id: NodeId, p: Vec2) {
        self.nodes[id].position = Some(p);
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> Option<&LinkState> {
        self.links.get(&key(a, b))
    }

    pub fn link_up(&self, a: NodeId, b: NodeId) -> bool {
        self.link(a, b).is_some_and(|l| l.up)
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkState> {
        self.links.values()
    }

    pub fn tables(&self) -> &[RoutingTable] {
        &self.tables
    }

    pub fn stats(&self) -> &MeshStats {
        &self.stats
    }

    pub fn wire(&self) -> &WireCounters {
        &self.wire
    }

    /// Unicast frames accepted but not yet delivered or dropped.
    pub fn in_flight(&self) -> u64 {
        self.frames.len() as u64
    }

    /// Flow audit: every accepted unicast frame is delivered, dropped or in flight.
    pub fn conserved(&self) -> bool {
        self.stats.sent == self.stats.delivered + self.stats.dropped + self.in_flight()
    }

    pub fn blackouts(&self) -> &[Blackout] {
        &self.blackouts
    }

    /// Current next-hop path from `src` to `dst`, following each node's table.
    pub fn route(&self, src: NodeId, dst: NodeId, now: f64) -> Option<Vec<NodeId>> {
        let mut path = vec![src];
        let mut cur = src;
        while cur != dst {
            let e = self.tables[cur].lookup(dst, now)?;
            cur = e.next_hop;
            if path.contains(&cur) {
                return None;
            }
            path.push(cur);
        }
        Some(path)
    }

    /// Drops `src`'s entry towards `dst` so its next frame starts a discovery.
    pub fn invalidate_route(&mut self, src: NodeId, dst: NodeId, now: f64) {
        if self.tables[src].invalidate(dst) {
            self.stats.table_updates += 1;
            let line = format!("invalidate {} dest={}", self.nodes[src].name, self.nodes[dst].name);
            self.log(now, line);
        }
    }

    /// Sum of per-hop fixed delays along the current route, if there is one.
    pub fn route_delay(&self, src: NodeId, dst: NodeId, now: f64) -> Option<f64> {
        let path = self.route(src, dst, now)?;
        Some(path.windows(2).map(|w| self.link(w[0], w[1]).map_or(0.0, |l| l.extra_delay_s)).sum())
    }

    /// Schedules the periodic link sampler. Call once before running.
    pub fn start<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>) {
        if self.started {
            return;
        }
        self.started = true;
        self.sample_links(kernel.now_secs(), &mut Vec::new());
        kernel.schedule_in(self.params.link_sample_period_s, TARGET, MeshEvent::LinkSample.into());
    }

    /// Forces the selected links down over `[start, end)`. Empty windows do nothing.
    pub fn add_blackout<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>, b: Blackout) {
        if b.end <= b.start {
            return;
        }
        let index = self.blackouts.len();
        let now = kernel.now_secs();
        let start = b.start.max(now);
        let end = b.end;
        self.blackouts.push(b);
        if end <= now {
            return;
        }
        kernel.schedule_in(start - now, TARGET, MeshEvent::Blackout { index, start: true }.into());
        kernel.schedule_in(end - now, TARGET, MeshEvent::Blackout { index, start: false }.into());
    }

    /// Powers a node on or off. Frames held by a node going down are lost;
    /// neighbours notice through failed transmissions or the next link sample.
    pub fn set_powered(&mut self, id: NodeId, on: bool, out: &mut Vec<MeshOutput<P>>) {
        if self.nodes[id].powered == on {
            return;
        }
        self.nodes[id].powered = on;
        if on {
            return;
        }
        let radio = std::mem::take(&mut self.radios[id]);
        let mut lost: Vec<Tx> = radio.queue.into_iter().collect();
        match radio.current {
            Some(Current::Unicast { id: f, .. }) => lost.push(Tx::Unicast(f)),
            Some(Current::Broadcast { copy, .. }) => lost.push(Tx::Broadcast(copy)),
            None => {}
        }
        for tx in lost {
            match tx {
                Tx::Unicast(f) => self.drop_frame(f, id, DropReason::NodeDown, out),
                Tx::Broadcast(c) => {
                    self.copies.remove(&c);
                }
            }
        }
        let keys: Vec<(NodeId, NodeId)> = self.pending.keys().filter(|(s, _)| *s == id).copied().collect();
        for k in keys {
            for f in self.pending.remove(&k).unwrap_or_default() {
                self.drop_frame(f, id, DropReason::NodeDown, out);
            }
        }
        self.tables[id] = RoutingTable::default();
    }

    /// Queues a unicast frame at `origin`.
    #[allow(clippy::too_many_arguments)]
    pub fn send<E: From<MeshEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        origin: NodeId,
        dst: NodeId,
        payload_bytes: usize,
        overhead_bytes: usize,
        class: TrafficClass,
        body: P,
        out: &mut Vec<MeshOutput<P>>,
    ) -> Result<u64, MeshError> {
        if origin >= self.nodes.len() || dst >= self.nodes.len() {
            return Err(MeshError::UnknownNode(format!("{origin}->{dst}")));
        }
        if origin == dst {
            return Err(MeshError::SelfAddressed);
        }
        if !self.nodes[origin].powered {
            return Err(MeshError::PoweredOff(self.nodes[origin].name.clone()));
        }
        let now = kernel.now_secs();
        let id = self.next_id;
        self.next_id += 1;
        self.frames.insert(
            id,
            Frame { id, origin, dest: Dest::Node(dst), payload_bytes, overhead_bytes, class, body, created_at: now },
        );
        self.stats.sent += 1;
        self.last_use.insert((origin, dst), now);
        if self.tables[origin].lookup(dst, now).is_some() {
            self.radios[origin].queue.push_back(Tx::Unicast(id));
            self.try_start(kernel, origin, out);
        } else {
            self.pending.entry((origin, dst)).or_default().push(id);
            self.start_discovery(kernel, origin, dst);
        }
        Ok(id)
    }

    /// Floods a frame to every reachable node. Each node re-broadcasts once;
    /// broadcast frames are not retried.
    pub fn broadcast<E: From<MeshEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        origin: NodeId,
        payload_bytes: usize,
        overhead_bytes: usize,
        class: TrafficClass,
        body: P,
        out: &mut Vec<MeshOutput<P>>,
    ) -> Result<u64, MeshError> {
        if origin >= self.nodes.len() {
            return Err(MeshError::UnknownNode(format!("{origin}")));
        }
        if !self.nodes[origin].powered {
            return Err(MeshError::PoweredOff(self.nodes[origin].name.clone()));
        }
        let now = kernel.now_secs();
        let id = self.next_id;
        self.next_id += 1;
        self.stats.broadcasts_sent += 1;
        self.seen.insert((id, origin));
        let copy = self.next_copy;
        self.next_copy += 1;
        self.copies.insert(
            copy,
            Frame { id, origin, dest: Dest::Broadcast, payload_bytes, overhead_bytes, class, body, created_at: now },
        );
        self.radios[origin].queue.push_back(Tx::Broadcast(copy));
        self.try_start(kernel, origin, out);
        Ok(id)
    }

    pub fn handle<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>, ev: MeshEvent) -> Vec<MeshOutput<P>> {
        let mut out = Vec::new();
        let now = kernel.now_secs();
        match ev {
            MeshEvent::TxDone { node } => self.tx_done(kernel, node, &mut out),
            MeshEvent::Arrive { copy, from, to, broadcast } => self.arrive(kernel, copy, from, to, broadcast, &mut out),
            MeshEvent::RouteReady { id } => self.route_ready(kernel, id, &mut out),
            MeshEvent::LinkSample => {
                self.sample_links(now, &mut out);
                self.refresh_routes(kernel);
                kernel.schedule_in(self.params.link_sample_period_s, TARGET, MeshEvent::LinkSample.into());
            }
            MeshEvent::Blackout { index, start } => {
                let sel = self.blackouts[index].links.clone();
                let keys: Vec<(NodeId, NodeId)> = self
                    .links
                    .keys()
                    .filter(|(a, b)| sel.matches(&self.nodes[*a].name, &self.nodes[*b].name))
                    .copied()
                    .collect();
                for k in keys {
                    let d = self.blackout_depth.entry(k).or_insert(0);
                    if start {
                        *d += 1;
                    } else {
                        *d = d.saturating_sub(1);
                    }
                    self.refresh_link_state(k, now);
                }
                self.log(now, format!("blackout {} {}", index, if start { "start" } else { "end" }));
            }
        }
        out
    }

    fn refresh_link_state(&mut self, k: (NodeId, NodeId), now: f64) {
        let powered = self.nodes[k.0].powered && self.nodes[k.1].powered;
        let dark = self.blackout_depth.get(&k).copied().unwrap_or(0) > 0;
        let Some(l) = self.links.get_mut(&k) else { return };
        let base = if l.fixed { true } else { self.params.curve.quality(l.distance).up };
        let was = l.up;
        l.up = base && powered && !dark;
        if was && !l.up {
            self.link_broken(k.0, k.1, now);
        }
    }

    fn sample_links(&mut self, now: f64, _out: &mut Vec<MeshOutput<P>>) {
        let period = self.params.link_sample_period_s;
        let keys: Vec<(NodeId, NodeId)> = self.links.keys().copied().collect();
        for k in keys {
            let (pa, pb) = (self.nodes[k.0].position, self.nodes[k.1].position);
            let busy = self.busy.remove(&k).unwrap_or(0.0);
            let l = self.links.get_mut(&k).expect("link");
            if !l.fixed {
                if let (Some(pa), Some(pb)) = (pa, pb) {
                    let q = self.params.curve.quality(pa.dist(pb));
                    l.distance = pa.dist(pb);
                    l.rate_bps = q.rate_bps;
                    l.e_f = q.e_f;
                }
            }
            l.load = (busy / period).min(1.0);
            self.refresh_link_state(k, now);
        }
    }

    /// Re-runs discovery for routes in recent use so they track link changes.
    fn refresh_routes<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>) {
        let now = kernel.now_secs();
        let due: Vec<(NodeId, NodeId)> = self
            .last_use
            .iter()
            .filter(|(k, t)| {
                now - **t < self.params.route_ttl_s
                    && self.last_discovery.get(k).is_none_or(|d| now - d >= self.params.preq_interval_s)
                    && !self.discovering.contains(k)
                    && self.nodes[k.0].powered
            })
            .map(|(k, _)| *k)
            .collect();
        for (s, d) in due {
            self.start_discovery(kernel, s, d);
        }
    }

    fn start_discovery<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>, src: NodeId, dst: NodeId) {
        if !self.discovering.insert((src, dst)) {
            return;
        }
        let now = kernel.now_secs();
        self.stats.discoveries += 1;
        self.last_discovery.insert((src, dst), now);
        self.nodes[src].seqnum += 1;
        let preq_bits = (self.params.preq_bytes * 8) as f64;
        let mut adj: Vec<Vec<Edge>> = vec![Vec::new(); self.nodes.len()];
        for l in self.links.values() {
            if !l.up || !self.nodes[l.a].powered || !self.nodes[l.b].powered {
                continue;
            }
            let metric = airtime_plus(l, &self.params);
            if !metric.is_finite() {
                continue;
            }
            let latency = l.attempt_time(preq_bits, &self.params) + l.extra_delay_s;
            adj[l.a].push(Edge { to: l.b, metric, latency });
            adj[l.b].push(Edge { to: l.a, metric, latency });
        }
        let result = flood(&adj, src, dst, self.params.max_hops);
        self.wire.add(src, WireCategory::RouteControl, result.preq_tx * self.params.preq_bytes);
        self.wire.add(src, WireCategory::RouteControl, result.prep_tx * self.params.prep_bytes);
        // A failed request gives up once the flood has had time to finish.
        let wait = if result.path.is_some() {
            result.latency
        } else {
            let slowest = adj.iter().flatten().map(|e| e.latency).fold(0.0, f64::max);
            2.0 * slowest * self.params.max_hops.min(self.nodes.len() as u32) as f64
        };
        let id = self.next_discovery;
        self.next_discovery += 1;
        self.discoveries.insert(id, PendingDiscovery { src, dst, result });
        kernel.schedule_in(wait, TARGET, MeshEvent::RouteReady { id }.into());
    }

    fn route_ready<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>, id: u64, out: &mut Vec<MeshOutput<P>>) {
        let Some(PendingDiscovery { src, dst, result }) = self.discoveries.remove(&id) else { return };
        self.discovering.remove(&(src, dst));
        let now = kernel.now_secs();
        let ttl = self.params.route_ttl_s;
        if let Some(path) = &result.path {
            if self.nodes[src].powered {
                self.nodes[dst].seqnum += 1;
                let dst_seq = self.nodes[dst].seqnum;
                let src_seq = self.nodes[src].seqnum;
                // Forward entries along the path.
                for (i, &node) in path.iter().enumerate().take(path.len() - 1) {
                    let from_src = if node == src { 0.0 } else { result.reverse[&node].1 };
                    let entry = RouteEntry {
                        next_hop: path[i + 1],
                        metric: result.metric - from_src,
                        seqnum: dst_seq,
                        expires_at: now + ttl,
                        hops: (path.len() - 1 - i) as u32,
                        valid: true,
                    };
                    self.install(node, dst, entry, now);
                }
                // Reverse entries wherever the request reached.
                for (&node, &(pred, metric, hops)) in &result.reverse {
                    if !self.nodes[node].powered {
                        continue;
                    }
                    let entry =
                        RouteEntry { next_hop: pred, metric, seqnum: src_seq, expires_at: now + ttl, hops, valid: true };
                    self.install(node, src, entry, now);
                }
                self.audit(dst, now);
                self.audit(src, now);
            }
        } else {
            self.log(now, format!("no route {} -> {}", self.nodes[src].name, self.nodes[dst].name));
        }
        let waiting = self.pending.remove(&(src, dst)).unwrap_or_default();
        if waiting.is_empty() {
            return;
        }
        if self.tables[src].lookup(dst, now).is_some() {
            for f in waiting {
                self.radios[src].queue.push_back(Tx::Unicast(f));
            }
            self.try_start(kernel, src, out);
        } else {
            for f in waiting {
                self.drop_frame(f, src, DropReason::NoRoute, out);
            }
        }
    }

    fn install(&mut self, node: NodeId, dest: NodeId, entry: RouteEntry, now: f64) {
        if self.tables[node].offer(dest, entry, now) {
            self.stats.table_updates += 1;
            let line = format!(
                "install {} dest={} next={} metric={:.6} seq={}",
                self.nodes[node].name, self.nodes[dest].name, self.nodes[entry.next_hop].name, entry.metric, entry.seqnum
            );
            self.log(now, line);
        }
    }

    fn audit(&mut self, dest: NodeId, now: f64) {
        if let Some(n) = find_loop(&self.tables, dest, now) {
            self.stats.loop_violations += 1;
            log::error!("routing loop towards {} at {}", self.nodes[dest].name, self.nodes[n].name);
        }
    }

    /// Path error: every route crossing the broken link is invalidated.
    fn link_broken(&mut self, a: NodeId, b: NodeId, now: f64) {
        let n = self.nodes.len();
        let mut victims = Vec::new();
        for node in 0..n {
            for (dest, _) in self.tables[node].iter() {
                let mut cur = node;
                for _ in 0..n {
                    let Some(e) = self.tables[cur].lookup(dest, now) else { break };
                    if key(cur, e.next_hop) == key(a, b) {
                        victims.push((node, dest));
                        break;
                    }
                    cur = e.next_hop;
                    if cur == dest {
                        break;
                    }
                }
            }
        }
        for (node, dest) in victims {
            if self.tables[node].invalidate(dest) {
                self.stats.table_updates += 1;
                let line = format!("invalidate {} dest={}", self.nodes[node].name, self.nodes[dest].name);
                self.log(now, line);
            }
        }
    }

    fn log(&mut self, now: f64, line: String) {
        if let Some(l) = self.route_log.as_mut() {
            l.push(format!("t={now:.6} {line}"));
        }
    }

    fn drop_frame(&mut self, id: u64, at_node: NodeId, reason: DropReason, out: &mut Vec<MeshOutput<P>>) {
        if let Some(frame) = self.frames.remove(&id) {
            self.stats.dropped += 1;
            *self.stats.drops.entry(reason).or_insert(0) += 1;
            out.push(MeshOutput::Dropped { frame, at_node, reason });
        }
    }

    fn account_first(&mut self, frame_origin: NodeId, class: TrafficClass, payload: usize, overhead: usize) {
        match class {
            TrafficClass::Data => {
                self.wire.add(frame_origin, WireCategory::Payload, payload);
                self.wire.add(frame_origin, WireCategory::Overhead, overhead);
            }
            TrafficClass::Retransmission => self.wire.add(frame_origin, WireCategory::Retransmission, payload + overhead),
            TrafficClass::Ack => self.wire.add(frame_origin, WireCategory::Ack, payload + overhead),
            TrafficClass::Discovery => self.wire.add(frame_origin, WireCategory::Discovery, payload + overhead),
        }
    }

    fn try_start<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>, n: NodeId, out: &mut Vec<MeshOutput<P>>) {
        let now = kernel.now_secs();
        while self.radios[n].current.is_none() {
            let Some(tx) = self.radios[n].queue.pop_front() else { return };
            match tx {
                Tx::Unicast(id) => {
                    let Some(frame) = self.frames.get(&id) else { continue };
                    let Dest::Node(dst) = frame.dest else { continue };
                    let (origin, class, payload, overhead, bits) =
                        (frame.origin, frame.class, frame.payload_bytes, frame.overhead_bytes, frame.bits());
                    let Some(entry) = self.tables[n].lookup(dst, now).copied() else {
                        if n == origin {
                            self.pending.entry((n, dst)).or_default().push(id);
                            self.start_discovery(kernel, n, dst);
                        } else {
                            self.drop_frame(id, n, DropReason::NoRoute, out);
                        }
                        continue;
                    };
                    let next = entry.next_hop;
                    let k = key(n, next);
                    if !self.links.get(&k).is_some_and(|l| l.up) {
                        self.drop_frame(id, n, DropReason::LinkDown, out);
                        self.link_broken(n, next, now);
                        continue;
                    }
                    self.tables[n].refresh(dst, now + self.params.route_ttl_s);
                    let receiver_up = self.nodes[next].powered;
                    let alpha = self.params.ewma_alpha;
                    let mut duration = 0.0;
                    let mut success = false;
                    for attempt in 0..=self.params.retry_limit {
                        let l = self.links.get_mut(&k).expect("link");
                        duration += l.attempt_time(bits, &self.params);
                        let e = if receiver_up { l.e_f } else { 1.0 };
                        let failed = self.rng.bernoulli(e);
                        update_per(l, failed, alpha);
                        if attempt == 0 {
                            self.account_first(origin, class, payload, overhead);
                        } else {
                            self.wire.add(origin, WireCategory::Retransmission, payload + overhead);
                        }
                        if !failed {
                            success = true;
                            break;
                        }
                    }
                    *self.busy.entry(k).or_insert(0.0) += duration;
                    self.radios[n].current = Some(Current::Unicast { id, next, success });
                    kernel.schedule_in(duration, TARGET, MeshEvent::TxDone { node: n }.into());
                }
                Tx::Broadcast(copy) => {
                    let Some(frame) = self.copies.get(&copy) else { continue };
                    let (origin, class, payload, overhead, bits) =
                        (frame.origin, frame.class, frame.payload_bytes, frame.overhead_bytes, frame.bits());
                    let neighbours: Vec<(NodeId, (NodeId, NodeId))> = self
                        .links
                        .iter()
                        .filter(|(k, l)| l.up && (k.0 == n || k.1 == n))
                        .map(|(k, _)| (if k.0 == n { k.1 } else { k.0 }, *k))
                        .collect();
                    if neighbours.is_empty() {
                        self.copies.remove(&copy);
                        continue;
                    }
                    let slowest = neighbours.iter().map(|(_, k)| self.links[k].rate_bps).fold(f64::INFINITY, f64::min);
                    let duration = self.params.overhead_s + bits / slowest;
                    let mut receivers = Vec::new();
                    for (m, k) in neighbours {
                        let e = if self.nodes[m].powered { self.links[&k].e_f } else { 1.0 };
                        if !self.rng.bernoulli(e) {
                            receivers.push(m);
                        }
                        *self.busy.entry(k).or_insert(0.0) += duration;
                    }
                    self.account_first(origin, class, payload, overhead);
                    self.radios[n].current = Some(Current::Broadcast { copy, receivers });
                    kernel.schedule_in(duration, TARGET, MeshEvent::TxDone { node: n }.into());
                }
            }
        }
    }

    fn tx_done<E: From<MeshEvent>>(&mut self, kernel: &mut Kernel<E>, n: NodeId, out: &mut Vec<MeshOutput<P>>) {
        let now = kernel.now_secs();
        match self.radios[n].current.take() {
            Some(Current::Unicast { id, next, success }) => {
                if success {
                    let delay = self.links.get(&key(n, next)).map_or(0.0, |l| l.extra_delay_s);
                    kernel.schedule_in(delay, TARGET, MeshEvent::Arrive { copy: id, from: n, to: next, broadcast: false }.into());
                } else {
                    self.drop_frame(id, n, DropReason::RetryLimit, out);
                    self.link_broken(n, next, now);
                }
            }
            Some(Current::Broadcast { copy, receivers }) => {
                if let Some(frame) = self.copies.remove(&copy) {
                    for m in receivers {
                        let c = self.next_copy;
                        self.next_copy += 1;
                        self.copies.insert(c, frame.clone());
                        let delay = self.links.get(&key(n, m)).map_or(0.0, |l| l.extra_delay_s);
                        kernel.schedule_in(delay, TARGET, MeshEvent::Arrive { copy: c, from: n, to: m, broadcast: true }.into());
                    }
                }
            }
            None => {}
        }
        self.try_start(kernel, n, out);
    }

    fn arrive<E: From<MeshEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        copy: u64,
        from: NodeId,
        to: NodeId,
        broadcast: bool,
        out: &mut Vec<MeshOutput<P>>,
    ) {
        let now = kernel.now_secs();
        let alive = self.link_up(from, to) && self.nodes[to].powered;
        if broadcast {
            let Some(frame) = self.copies.remove(&copy) else { return };
            if !alive || !self.seen.insert((frame.id, to)) {
                return;
            }
            out.push(MeshOutput::Delivered { frame: frame.clone(), to, at: now });
            let c = self.next_copy;
            self.next_copy += 1;
            self.copies.insert(c, frame);
            self.radios[to].queue.push_back(Tx::Broadcast(c));
            self.try_start(kernel, to, out);
            return;
        }
        if !alive {
            let reason = if self.nodes[to].powered { DropReason::LinkDown } else { DropReason::NodeDown };
            self.drop_frame(copy, from, reason, out);
            return;
        }
        let Some(frame) = self.frames.get(&copy) else { return };
        if frame.dest == Dest::Node(to) {
            let frame = self.frames.remove(&copy).expect("frame");
            self.stats.delivered += 1;
            out.push(MeshOutput::Delivered { frame, to, at: now });
        } else {
            self.radios[to].queue.push_back(Tx::Unicast(copy));
            self.try_start(kernel, to, out);
        }
    }
}
