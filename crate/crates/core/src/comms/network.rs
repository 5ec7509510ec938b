//! Publish/subscribe over the mesh.
//!
//! Messages travel hop-to-final where the mesh routes them. Anything to or
//! from the gateway remote goes through the gateway host, which reassembles
//! and stores it until the remote link is up. Reliable traffic runs a
//! selective-repeat session per (sender, next stop) pair; best-effort
//! fragments are fire and forget.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::gateway::{GatewayBuffer, GatewayConfig, Overflow, Queued};
use super::types::*;
use crate::geometry::Vec2;
use crate::kernel::{Kernel, RngStream};
use crate::meshnet::{Mesh, MeshError, MeshEvent, MeshOutput, NetParams, NodeId, TrafficClass};

const TARGET: &str = "comms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommsParams {
    /// Header bytes per message, counted once on its first fragment.
    pub overhead_bytes: usize,
    pub mtu_bytes: usize,
    pub ack_bytes: usize,
    pub announce_period_s: f64,
    /// A peer is forgotten after this many silent announce periods.
    pub expiry_periods: f64,
    /// Unacknowledged fragments in flight per session.
    pub window: usize,
    pub rto_floor_s: f64,
    pub rto_max_s: f64,
    /// Retransmissions between forced route rediscoveries.
    pub retry_limit: u32,
    /// Queued reliable messages per session before a backlog fault.
    pub source_depth: usize,
    /// A reliable session is abandoned once its peer has been silent this long.
    pub abandon_after_s: f64,
    /// Incomplete best-effort messages are discarded after this long.
    pub reassembly_timeout_s: f64,
    pub gateway: GatewayConfig,
}

impl Default for CommsParams {
    fn default() -> Self {
        CommsParams {
            overhead_bytes: 64,
            mtu_bytes: 1500,
            ack_bytes: 32,
            announce_period_s: 2.0,
            expiry_periods: 3.0,
            window: 64,
            rto_floor_s: 0.25,
            rto_max_s: 8.0,
            retry_limit: 4,
            source_depth: 512,
            abandon_after_s: 30.0,
            reassembly_timeout_s: 10.0,
            gateway: GatewayConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CommsEvent {
    Announce { node: NodeId },
    Rto { node: NodeId, peer: NodeId, stream: u64, index: u16, retries: u32 },
    GatewayTick,
}

/// Event type for a kernel that only runs the network.
#[derive(Clone, Debug, PartialEq)]
pub enum NetEvent {
    Mesh(MeshEvent),
    Comms(CommsEvent),
}

impl From<MeshEvent> for NetEvent {
    fn from(e: MeshEvent) -> Self {
        NetEvent::Mesh(e)
    }
}

impl From<CommsEvent> for NetEvent {
    fn from(e: CommsEvent) -> Self {
        NetEvent::Comms(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommsFault {
    /// The gateway buffer is over capacity with reliable data only.
    GatewayOverflow { queued: usize },
    GatewayDroppedBestEffort { count: u64 },
    /// A reliable session has more queued messages than the source depth.
    SourceBacklog { peer: String, depth: usize },
    /// The peer expired; its session was abandoned.
    PeerLost { peer: String, dropped: usize },
}

#[derive(Clone, Debug)]
pub enum CommsOutput {
    Delivery { node: NodeId, envelope: Arc<Envelope>, at: f64 },
    Fault { node: NodeId, fault: CommsFault, at: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommsStats {
    pub published: u64,
    pub delivered: u64,
    pub stale_dropped: u64,
    pub retransmissions: u64,
    pub rediscoveries: u64,
    pub abandoned: u64,
    pub acks_sent: u64,
    pub announcements: u64,
}

/// A namespace as seen from one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamespaceEntry {
    pub namespace: String,
    pub node: String,
    pub last_seen: f64,
    pub alive: bool,
}

struct Outstanding {
    frag: Fragment,
    payload: usize,
    overhead: usize,
    retries: u32,
}

#[derive(Default)]
struct TxSession {
    next_stream: u64,
    queue: VecDeque<(Fragment, usize, usize)>,
    outstanding: BTreeMap<(u64, u16), Outstanding>,
    backlog_flagged: bool,
}

impl TxSession {
    fn base(&self) -> u64 {
        let q = self.queue.front().and_then(|(f, _, _)| f.stream);
        let o = self.outstanding.keys().next().map(|k| k.0);
        q.into_iter().chain(o).min().unwrap_or(self.next_stream)
    }

    fn queued_messages(&self) -> usize {
        let mut ids: BTreeSet<u64> = self.queue.iter().map(|(f, _, _)| f.msg_id).collect();
        ids.extend(self.outstanding.values().map(|o| o.frag.msg_id));
        ids.len()
    }
}

struct Assembly {
    envelope: Arc<Envelope>,
    final_dst: NodeId,
    count: u16,
    got: BTreeSet<u16>,
    started: f64,
}

impl Assembly {
    fn new(f: &Fragment, now: f64) -> Assembly {
        Assembly { envelope: f.envelope.clone(), final_dst: f.final_dst, count: f.count, got: BTreeSet::new(), started: now }
    }

    fn complete(&self) -> bool {
        self.got.len() == self.count as usize
    }
}

#[derive(Default)]
struct RxSession {
    next_deliver: u64,
    pending: BTreeMap<u64, Assembly>,
}

struct Peer {
    ann: Arc<Announcement>,
    last_seen: f64,
}

struct CommsNode {
    name: String,
    namespaces: BTreeSet<String>,
    topics: BTreeSet<Topic>,
    subs: BTreeSet<Pattern>,
    peers: BTreeMap<NodeId, Peer>,
    topic_seq: BTreeMap<Topic, u64>,
    tx: BTreeMap<NodeId, TxSession>,
    rx: BTreeMap<NodeId, RxSession>,
    best_effort: BTreeMap<(NodeId, u64), Assembly>,
    last_seq: BTreeMap<(String, Topic), u64>,
    next_msg: u64,
}

impl CommsNode {
    fn new(name: &str) -> CommsNode {
        CommsNode {
            name: name.to_string(),
            namespaces: BTreeSet::new(),
            topics: BTreeSet::new(),
            subs: BTreeSet::new(),
            peers: BTreeMap::new(),
            topic_seq: BTreeMap::new(),
            tx: BTreeMap::new(),
            rx: BTreeMap::new(),
            best_effort: BTreeMap::new(),
            last_seq: BTreeMap::new(),
            next_msg: 0,
        }
    }
}

/// Mesh plus the messaging layer on top of it.
pub struct Network {
    pub mesh: Mesh<Packet>,
    pub params: CommsParams,
    nodes: Vec<CommsNode>,
    /// (host, remote) once both gateway nodes exist.
    gateway: Option<(NodeId, NodeId)>,
    /// Patterns the remote subscribed to, held by the host.
    proxy: BTreeSet<Pattern>,
    buffer: GatewayBuffer,
    stats: CommsStats,
    started: bool,
}

fn split_sizes(payload: usize, overhead: usize, mtu: usize) -> Vec<(usize, usize)> {
    let first = mtu.saturating_sub(overhead).max(1);
    let mut out = vec![(payload.min(first), overhead)];
    let mut left = payload.saturating_sub(first);
    while left > 0 {
        let n = left.min(mtu);
        out.push((n, 0));
        left -= n;
    }
    out
}

/// Number of fragments a message of `payload` bytes needs.
pub fn fragment_count(payload: usize, params: &CommsParams) -> usize {
    split_sizes(payload, params.overhead_bytes, params.mtu_bytes).len()
}

impl Network {
    pub fn new(net: NetParams, params: CommsParams, rng: RngStream) -> Network {
        let buffer = GatewayBuffer::new(params.gateway.capacity_bytes);
        Network {
            mesh: Mesh::new(net, rng),
            params,
            nodes: Vec::new(),
            gateway: None,
            proxy: BTreeSet::new(),
            buffer,
            stats: CommsStats::default(),
            started: false,
        }
    }

    pub fn add_node(&mut self, name: &str, position: Option<Vec2>) -> Result<NodeId, MeshError> {
        let id = self.mesh.add_node(name, position)?;
        self.nodes.push(CommsNode::new(name));
        let host = self.mesh.node_id(&self.params.gateway.host);
        let remote = self.mesh.node_id(&self.params.gateway.remote);
        if let (Some(h), Some(r)) = (host, remote) {
            self.gateway = Some((h, r));
        }
        Ok(id)
    }

    pub fn add_fixed_link(&mut self, a: NodeId, b: NodeId, rate_bps: f64, e_f: f64, extra_delay_s: f64) {
        self.mesh.add_fixed_link(a, b, rate_bps, e_f, extra_delay_s);
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.mesh.node_id(name)
    }

    pub fn stats(&self) -> &CommsStats {
        &self.stats
    }

    pub fn gateway_buffer(&self) -> &GatewayBuffer {
        &self.buffer
    }

    /// Reliable messages not yet acknowledged on any hop.
    pub fn reliable_backlog(&self) -> usize {
        self.nodes.iter().flat_map(|n| n.tx.values()).map(TxSession::queued_messages).sum()
    }

    pub fn start<E: From<MeshEvent> + From<CommsEvent>>(&mut self, kernel: &mut Kernel<E>) {
        if self.started {
            return;
        }
        self.started = true;
        self.mesh.start(kernel);
        for node in 0..self.nodes.len() {
            let phase = 0.01 + 0.05 * node as f64 % self.params.announce_period_s;
            kernel.schedule_in(phase, TARGET, CommsEvent::Announce { node }.into());
        }
        if self.gateway.is_some() {
            kernel.schedule_in(self.params.gateway.tick_s, TARGET, CommsEvent::GatewayTick.into());
        }
    }

    /// Claims a namespace for `node`; it shows up in the node's announcements.
    pub fn claim_namespace(&mut self, node: NodeId, ns: &str) {
        self.nodes[node].namespaces.insert(ns.to_string());
    }

    pub fn advertise(&mut self, node: NodeId, topic: &Topic) {
        self.nodes[node].namespaces.insert(topic.namespace.clone());
        self.nodes[node].topics.insert(topic.clone());
    }

    /// Subscribing twice to the same pattern is a no-op.
    pub fn subscribe(&mut self, node: NodeId, pattern: Pattern) {
        self.nodes[node].subs.insert(pattern.clone());
        if self.gateway.is_some_and(|(_, r)| r == node) {
            self.proxy.insert(pattern);
        }
    }

    pub fn unsubscribe(&mut self, node: NodeId, pattern: &Pattern) {
        self.nodes[node].subs.remove(pattern);
    }

    fn alive(&self, node: NodeId, peer: &Peer, now: f64) -> bool {
        let _ = node;
        now - peer.last_seen <= self.params.announce_period_s * self.params.expiry_periods
    }

    /// Namespaces `node` currently knows about, its own included.
    pub fn namespaces_seen_by(&self, node: NodeId, now: f64) -> Vec<NamespaceEntry> {
        let me = &self.nodes[node];
        let mut out: Vec<NamespaceEntry> = me
            .namespaces
            .iter()
            .map(|ns| NamespaceEntry { namespace: ns.clone(), node: me.name.clone(), last_seen: now, alive: true })
            .collect();
        for peer in me.peers.values() {
            let alive = self.alive(node, peer, now);
            for ns in &peer.ann.namespaces {
                out.push(NamespaceEntry {
                    namespace: ns.clone(),
                    node: peer.ann.node.clone(),
                    last_seen: peer.last_seen,
                    alive,
                });
            }
        }
        out.sort_by(|a, b| a.namespace.cmp(&b.namespace).then(a.node.cmp(&b.node)));
        out
    }

    /// Final destinations for a topic published at `node`, excluding itself.
    fn destinations(&self, node: NodeId, topic: &Topic, now: f64) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        for (&p, peer) in &self.nodes[node].peers {
            if !self.alive(node, peer, now) {
                continue;
            }
            if peer.ann.subscriptions.iter().any(|s| s.matches(topic)) {
                out.insert(p);
            }
            for (name, pat) in &peer.ann.proxied {
                if pat.matches(topic) {
                    if let Some(id) = self.mesh.node_id(name) {
                        out.insert(id);
                    }
                }
            }
        }
        if let Some((h, r)) = self.gateway {
            if node == h && self.proxy.iter().any(|s| s.matches(topic)) {
                out.insert(r);
            }
        }
        out.remove(&node);
        out
    }

    /// Where a message from `node` to `final_dst` goes next.
    fn next_stop(&self, node: NodeId, final_dst: NodeId) -> NodeId {
        match self.gateway {
            Some((h, r)) if node != h && final_dst != h && (final_dst == r || node == r) => h,
            _ => final_dst,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn publish<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        topic: &Topic,
        payload: Payload,
        qos: Qos,
        out: &mut Vec<CommsOutput>,
    ) -> Result<Arc<Envelope>, CommsError> {
        if node >= self.nodes.len() {
            return Err(CommsError::UnknownNode(node.to_string()));
        }
        if !self.mesh.powered(node) {
            return Err(CommsError::PoweredOff(self.nodes[node].name.clone()));
        }
        let now = kernel.now_secs();
        // Publishing into another node's namespace (commands) must not claim it.
        self.nodes[node].topics.insert(topic.clone());
        let me = &mut self.nodes[node];
        let seq = me.topic_seq.entry(topic.clone()).or_insert(0);
        *seq += 1;
        let envelope = Arc::new(Envelope {
            topic: topic.clone(),
            publisher: me.name.clone(),
            qos,
            seq: *seq,
            sent_at: now,
            payload_bytes: payload.wire_size(),
            payload,
        });
        self.stats.published += 1;
        if self.nodes[node].subs.iter().any(|s| s.matches(topic)) {
            self.deliver_local(node, envelope.clone(), now, out);
        }
        let dests = self.destinations(node, topic, now);
        let mut stops = BTreeSet::new();
        for f in dests {
            self.forward(kernel, node, f, envelope.clone(), &mut stops, out);
        }
        Ok(envelope)
    }

    /// Sends `envelope` from `node` towards `final_dst`. `sent` dedupes
    /// copies that share a next stop.
    fn forward<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        final_dst: NodeId,
        envelope: Arc<Envelope>,
        sent: &mut BTreeSet<(NodeId, NodeId)>,
        out: &mut Vec<CommsOutput>,
    ) {
        if let Some((h, r)) = self.gateway {
            if node == h && final_dst == r {
                if sent.insert((h, r)) {
                    self.enqueue_gateway(kernel, envelope, out);
                }
                return;
            }
        }
        let stop = self.next_stop(node, final_dst);
        // Everything headed through the host for the remote is one copy.
        let key = if stop != final_dst { (stop, final_dst) } else { (final_dst, final_dst) };
        if sent.insert(key) {
            self.send_message(kernel, node, stop, final_dst, envelope, out);
        }
    }

    fn enqueue_gateway<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        envelope: Arc<Envelope>,
        out: &mut Vec<CommsOutput>,
    ) {
        let Some((h, r)) = self.gateway else { return };
        let bytes = envelope.payload_bytes + self.params.overhead_bytes;
        let now = kernel.now_secs();
        let fault = match self.buffer.push(Queued { envelope, final_dst: r, bytes }) {
            Some(Overflow::DroppedBestEffort(count)) => Some(CommsFault::GatewayDroppedBestEffort { count }),
            Some(Overflow::ReliableOverCapacity { queued }) => Some(CommsFault::GatewayOverflow { queued }),
            None => None,
        };
        if let Some(fault) = fault {
            out.push(CommsOutput::Fault { node: h, fault, at: now });
        }
        self.flush_gateway(kernel, out);
    }

    fn gateway_blocked(&self, node: NodeId, peer: NodeId) -> bool {
        match self.gateway {
            Some((h, r)) if (node == h && peer == r) || (node == r && peer == h) => !self.mesh.link_up(h, r),
            _ => false,
        }
    }

    fn flush_gateway<E: From<MeshEvent> + From<CommsEvent>>(&mut self, kernel: &mut Kernel<E>, out: &mut Vec<CommsOutput>) {
        let Some((h, r)) = self.gateway else { return };
        while !self.buffer.is_empty() && self.mesh.link_up(h, r) && self.mesh.powered(h) {
            let q = self.buffer.pop().expect("non-empty");
            self.send_message(kernel, h, r, q.final_dst, q.envelope, out);
        }
    }

    fn send_message<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        stop: NodeId,
        final_dst: NodeId,
        envelope: Arc<Envelope>,
        out: &mut Vec<CommsOutput>,
    ) {
        if !self.mesh.powered(node) {
            return;
        }
        let sizes = split_sizes(envelope.payload_bytes, self.params.overhead_bytes, self.params.mtu_bytes);
        let count = sizes.len() as u16;
        let me = &mut self.nodes[node];
        let msg_id = me.next_msg;
        me.next_msg += 1;
        match envelope.qos {
            Qos::Reliable => {
                let sess = me.tx.entry(stop).or_default();
                let stream = sess.next_stream;
                sess.next_stream += 1;
                for (index, (p, o)) in sizes.into_iter().enumerate() {
                    let frag = Fragment {
                        envelope: envelope.clone(),
                        final_dst,
                        stream: Some(stream),
                        base: 0,
                        msg_id,
                        index: index as u16,
                        count,
                    };
                    sess.queue.push_back((frag, p, o));
                }
                let depth = sess.queued_messages();
                if depth > self.params.source_depth && !sess.backlog_flagged {
                    sess.backlog_flagged = true;
                    let peer = self.nodes[stop].name.clone();
                    out.push(CommsOutput::Fault {
                        node,
                        fault: CommsFault::SourceBacklog { peer, depth },
                        at: kernel.now_secs(),
                    });
                }
                self.pump(kernel, node, stop, out);
            }
            Qos::BestEffort => {
                for (index, (p, o)) in sizes.into_iter().enumerate() {
                    let frag = Fragment {
                        envelope: envelope.clone(),
                        final_dst,
                        stream: None,
                        base: 0,
                        msg_id,
                        index: index as u16,
                        count,
                    };
                    self.transmit(kernel, node, stop, frag, p, o, TrafficClass::Data, out);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transmit<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        peer: NodeId,
        frag: Fragment,
        payload: usize,
        overhead: usize,
        class: TrafficClass,
        out: &mut Vec<CommsOutput>,
    ) {
        let mut mout = Vec::new();
        let _ = self.mesh.send(kernel, node, peer, payload, overhead, class, Packet::Data(frag), &mut mout);
        self.absorb(kernel, mout, out);
    }

    fn rto(&self, node: NodeId, peer: NodeId, retries: u32, now: f64) -> f64 {
        let delay = self
            .mesh
            .route_delay(node, peer, now)
            .or_else(|| self.mesh.link(node, peer).map(|l| l.extra_delay_s))
            .unwrap_or(1.0);
        let base = self.params.rto_floor_s + 2.0 * delay;
        (base * f64::powi(2.0, retries.min(6) as i32)).min(base + self.params.rto_max_s)
    }

    fn pump<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        peer: NodeId,
        out: &mut Vec<CommsOutput>,
    ) {
        if self.gateway_blocked(node, peer) || !self.mesh.powered(node) {
            return;
        }
        let now = kernel.now_secs();
        loop {
            let window = self.params.window;
            let Some(sess) = self.nodes[node].tx.get_mut(&peer) else { return };
            if sess.outstanding.len() >= window {
                return;
            }
            let base = sess.base();
            let Some((mut frag, p, o)) = sess.queue.pop_front() else {
                sess.backlog_flagged = false;
                return;
            };
            frag.base = base;
            let (stream, index) = (frag.stream.expect("reliable"), frag.index);
            sess.outstanding.insert((stream, index), Outstanding { frag: frag.clone(), payload: p, overhead: o, retries: 0 });
            let rto = self.rto(node, peer, 0, now);
            kernel.schedule_in(rto, TARGET, CommsEvent::Rto { node, peer, stream, index, retries: 0 }.into());
            self.transmit(kernel, node, peer, frag, p, o, TrafficClass::Data, out);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_rto<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        peer: NodeId,
        stream: u64,
        index: u16,
        retries: u32,
        out: &mut Vec<CommsOutput>,
    ) {
        let now = kernel.now_secs();
        let Some(o) = self.nodes[node].tx.get(&peer).and_then(|s| s.outstanding.get(&(stream, index))) else {
            return;
        };
        if o.retries != retries || !self.mesh.powered(node) {
            return;
        }
        if self.gateway_blocked(node, peer) {
            let rto = self.rto(node, peer, 0, now);
            kernel.schedule_in(rto, TARGET, CommsEvent::Rto { node, peer, stream, index, retries }.into());
            return;
        }
        let horizon = self.params.abandon_after_s;
        let expired = self.nodes[node].peers.get(&peer).is_some_and(|p| now - p.last_seen > horizon);
        let remote_pair = self.gateway.is_some_and(|(h, r)| (node, peer) == (h, r) || (node, peer) == (r, h));
        if expired && !remote_pair {
            let sess = self.nodes[node].tx.entry(peer).or_default();
            let dropped = sess.queued_messages();
            sess.queue.clear();
            sess.outstanding.clear();
            sess.backlog_flagged = false;
            self.stats.abandoned += dropped as u64;
            let name = self.nodes[peer].name.clone();
            out.push(CommsOutput::Fault { node, fault: CommsFault::PeerLost { peer: name, dropped }, at: now });
            return;
        }
        let retries = retries + 1;
        if retries % self.params.retry_limit.max(1) == 0 {
            self.mesh.invalidate_route(node, peer, now);
            self.stats.rediscoveries += 1;
        }
        let o = self.nodes[node]
            .tx
            .get_mut(&peer)
            .and_then(|s| s.outstanding.get_mut(&(stream, index)))
            .expect("checked above");
        o.retries = retries;
        let (mut frag, p, ov) = (o.frag.clone(), o.payload, o.overhead);
        frag.base = self.nodes[node].tx[&peer].base();
        self.stats.retransmissions += 1;
        let rto = self.rto(node, peer, retries, now);
        kernel.schedule_in(rto, TARGET, CommsEvent::Rto { node, peer, stream, index, retries }.into());
        self.transmit(kernel, node, peer, frag, p, ov, TrafficClass::Retransmission, out);
    }

    pub fn set_powered<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        on: bool,
        out: &mut Vec<CommsOutput>,
    ) {
        let mut mout = Vec::new();
        self.mesh.set_powered(node, on, &mut mout);
        self.absorb(kernel, mout, out);
        if !on {
            return;
        }
        let now = kernel.now_secs();
        let peers: Vec<NodeId> = self.nodes[node].tx.keys().copied().collect();
        for peer in peers {
            let keys: Vec<((u64, u16), u32)> =
                self.nodes[node].tx[&peer].outstanding.iter().map(|(k, o)| (*k, o.retries)).collect();
            for ((stream, index), retries) in keys {
                let rto = self.rto(node, peer, 0, now);
                kernel.schedule_in(rto, TARGET, CommsEvent::Rto { node, peer, stream, index, retries }.into());
            }
            self.pump(kernel, node, peer, out);
        }
    }

    fn announce<E: From<MeshEvent> + From<CommsEvent>>(&mut self, kernel: &mut Kernel<E>, node: NodeId, out: &mut Vec<CommsOutput>) {
        let now = kernel.now_secs();
        kernel.schedule_in(self.params.announce_period_s, TARGET, CommsEvent::Announce { node }.into());
        let horizon = self.params.reassembly_timeout_s;
        self.nodes[node].best_effort.retain(|_, a| now - a.started <= horizon);
        if !self.mesh.powered(node) {
            return;
        }
        let me = &self.nodes[node];
        let proxied = match self.gateway {
            Some((h, r)) if h == node => {
                let remote = self.nodes[r].name.clone();
                self.proxy.iter().map(|p| (remote.clone(), p.clone())).collect()
            }
            _ => Vec::new(),
        };
        let ann = Announcement {
            node: me.name.clone(),
            namespaces: me.namespaces.iter().cloned().collect(),
            topics: me.topics.iter().cloned().collect(),
            subscriptions: me.subs.iter().cloned().collect(),
            proxied,
        };
        let size = ann.wire_size();
        let mut mout = Vec::new();
        let overhead = self.params.overhead_bytes;
        if self
            .mesh
            .broadcast(kernel, node, size, overhead, TrafficClass::Discovery, Packet::Announce(Arc::new(ann)), &mut mout)
            .is_ok()
        {
            self.stats.announcements += 1;
        }
        self.absorb(kernel, mout, out);
    }

    pub fn handle<E: From<MeshEvent> + From<CommsEvent>>(&mut self, kernel: &mut Kernel<E>, ev: NetEvent) -> Vec<CommsOutput> {
        let mut out = Vec::new();
        match ev {
            NetEvent::Mesh(e) => {
                let was_up = self.gateway.map(|(h, r)| self.mesh.link_up(h, r));
                let mout = self.mesh.handle(kernel, e);
                self.absorb(kernel, mout, &mut out);
                if let (Some((h, r)), Some(false)) = (self.gateway, was_up) {
                    if self.mesh.link_up(h, r) {
                        self.resume_gateway(kernel, &mut out);
                    }
                }
            }
            NetEvent::Comms(CommsEvent::Announce { node }) => self.announce(kernel, node, &mut out),
            NetEvent::Comms(CommsEvent::Rto { node, peer, stream, index, retries }) => {
                self.on_rto(kernel, node, peer, stream, index, retries, &mut out)
            }
            NetEvent::Comms(CommsEvent::GatewayTick) => {
                kernel.schedule_in(self.params.gateway.tick_s, TARGET, CommsEvent::GatewayTick.into());
                self.resume_gateway(kernel, &mut out);
            }
        }
        out
    }

    fn resume_gateway<E: From<MeshEvent> + From<CommsEvent>>(&mut self, kernel: &mut Kernel<E>, out: &mut Vec<CommsOutput>) {
        let Some((h, r)) = self.gateway else { return };
        if !self.mesh.link_up(h, r) {
            return;
        }
        self.flush_gateway(kernel, out);
        self.pump(kernel, h, r, out);
        self.pump(kernel, r, h, out);
    }

    fn absorb<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        mout: Vec<MeshOutput<Packet>>,
        out: &mut Vec<CommsOutput>,
    ) {
        for o in mout {
            // Drops are recovered by retransmission timers or not at all.
            if let MeshOutput::Delivered { frame, to, at } = o {
                let from = frame.origin;
                // Any traffic from a known peer shows it is still there.
                if let Some(p) = self.nodes[to].peers.get_mut(&from) {
                    p.last_seen = p.last_seen.max(at);
                }
                match frame.body {
                    Packet::Data(frag) => self.on_fragment(kernel, to, from, frag, at, out),
                    Packet::Ack { stream, index } => {
                        let acked = self.nodes[to]
                            .tx
                            .get_mut(&from)
                            .is_some_and(|s| s.outstanding.remove(&(stream, index)).is_some());
                        if acked {
                            self.pump(kernel, to, from, out);
                        }
                    }
                    Packet::Announce(ann) => {
                        if self.gateway.is_some_and(|(h, r)| to == h && from == r) {
                            self.proxy = ann.subscriptions.iter().cloned().collect();
                        }
                        self.nodes[to].peers.insert(from, Peer { ann, last_seen: at });
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_fragment<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        from: NodeId,
        frag: Fragment,
        at: f64,
        out: &mut Vec<CommsOutput>,
    ) {
        let mut done = Vec::new();
        match frag.stream {
            Some(stream) => {
                let mut mout = Vec::new();
                let ack = Packet::Ack { stream, index: frag.index };
                let bytes = self.params.ack_bytes;
                if self.mesh.send(kernel, node, from, 0, bytes, TrafficClass::Ack, ack, &mut mout).is_ok() {
                    self.stats.acks_sent += 1;
                }
                let rx = self.nodes[node].rx.entry(from).or_default();
                if frag.base > rx.next_deliver {
                    rx.pending.retain(|s, _| *s >= frag.base);
                    rx.next_deliver = frag.base;
                }
                if stream >= rx.next_deliver {
                    rx.pending.entry(stream).or_insert_with(|| Assembly::new(&frag, at)).got.insert(frag.index);
                    while rx.pending.get(&rx.next_deliver).is_some_and(Assembly::complete) {
                        let a = rx.pending.remove(&rx.next_deliver).expect("present");
                        rx.next_deliver += 1;
                        done.push(a);
                    }
                }
                self.absorb(kernel, mout, out);
            }
            None => {
                let key = (from, frag.msg_id);
                let me = &mut self.nodes[node];
                let a = me.best_effort.entry(key).or_insert_with(|| Assembly::new(&frag, at));
                a.got.insert(frag.index);
                if a.complete() {
                    done.push(me.best_effort.remove(&key).expect("present"));
                }
            }
        }
        for a in done {
            self.complete(kernel, node, a.envelope, a.final_dst, at, out);
        }
    }

    fn complete<E: From<MeshEvent> + From<CommsEvent>>(
        &mut self,
        kernel: &mut Kernel<E>,
        node: NodeId,
        envelope: Arc<Envelope>,
        final_dst: NodeId,
        at: f64,
        out: &mut Vec<CommsOutput>,
    ) {
        if final_dst == node {
            if self.nodes[node].subs.iter().any(|s| s.matches(&envelope.topic)) {
                self.deliver_local(node, envelope, at, out);
            }
            return;
        }
        self.forward(kernel, node, final_dst, envelope, &mut BTreeSet::new(), out);
    }

    fn deliver_local(&mut self, node: NodeId, envelope: Arc<Envelope>, at: f64, out: &mut Vec<CommsOutput>) {
        let key = (envelope.publisher.clone(), envelope.topic.clone());
        let last = self.nodes[node].last_seq.entry(key).or_insert(0);
        if envelope.qos == Qos::BestEffort && envelope.seq <= *last {
            self.stats.stale_dropped += 1;
            return;
        }
        *last = (*last).max(envelope.seq);
        self.stats.delivered += 1;
        out.push(CommsOutput::Delivery { node, envelope, at });
    }
}
