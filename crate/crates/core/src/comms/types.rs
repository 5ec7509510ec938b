//! Topics, envelopes and the message payloads carried over the mesh.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2;
use crate::mapping::Placement;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommsError {
    #[error("invalid topic {0:?}")]
    BadTopic(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is powered off")]
    PoweredOff(String),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Topic {
    pub namespace: String,
    pub name: String,
}

impl Topic {
    pub fn new(namespace: &str, name: &str) -> Topic {
        Topic { namespace: namespace.to_string(), name: name.to_string() }
    }

    /// Parses `<ns>/<name>`.
    pub fn parse(path: &str) -> Result<Topic, CommsError> {
        match path.split_once('/') {
            Some((ns, name)) if !ns.is_empty() && !name.is_empty() && ns != "*" && !name.contains('/') => {
                Ok(Topic::new(ns, name))
            }
            _ => Err(CommsError::BadTopic(path.to_string())),
        }
    }

    pub fn path(&self) -> String {
        format!("{}/{}", self.namespace, self.name)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)
    }
}

/// Subscription pattern: an exact topic or a name in every namespace.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Exact(Topic),
    AnyNamespace(String),
}

impl Pattern {
    /// Parses `<ns>/<name>` or `*/<name>`.
    pub fn parse(s: &str) -> Result<Pattern, CommsError> {
        if let Some(name) = s.strip_prefix("*/") {
            if name.is_empty() || name.contains('/') {
                return Err(CommsError::BadTopic(s.to_string()));
            }
            return Ok(Pattern::AnyNamespace(name.to_string()));
        }
        Topic::parse(s).map(Pattern::Exact)
    }

    pub fn matches(&self, t: &Topic) -> bool {
        match self {
            Pattern::Exact(x) => x == t,
            Pattern::AnyNamespace(name) => *name == t.name,
        }
    }

    fn wire_len(&self) -> usize {
        match self {
            Pattern::Exact(t) => t.namespace.len() + t.name.len() + 2,
            Pattern::AnyNamespace(n) => n.len() + 3,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Exact(t) => write!(f, "{t}"),
            Pattern::AnyNamespace(n) => write!(f, "*/{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qos {
    Reliable,
    BestEffort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoverStatus {
    pub headlights: bool,
    pub odometry_degraded: bool,
    pub drift_m: f64,
    pub autonomy_enabled: bool,
    pub blocked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavState {
    Idle,
    Active,
    Reached,
    /// No path to the goal; the operator has to take over.
    Failed,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub rover: String,
    pub accepted: bool,
    pub detail: String,
    pub transform: Option<Pose2>,
    pub overlap_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Odom { pose: Pose2, v: f64, w: f64 },
    /// Range scans are accounted by size only.
    Scan { beams: u32 },
    /// Local occupancy grid in wire format.
    Map { data: Arc<Vec<u8>> },
    Status(RoverStatus),
    CmdVel { v: f64, w: f64 },
    Lights { on: bool },
    ResetOdom { pose: Pose2 },
    Reboot,
    /// Goal in the rover's own odometric frame.
    NavGoal { x: f64, y: f64 },
    CancelNav,
    CmdAck { command: String, seq: u64 },
    NavStatus { state: NavState, detail: String },
    MergedMap { data: Arc<Vec<u8>>, placements: Vec<Placement> },
    MergeStatus { reports: Vec<MergeReport> },
    Bytes(Arc<Vec<u8>>),
}

impl Payload {
    /// Serialized size, bytes.
    pub fn wire_size(&self) -> usize {
        match self {
            Payload::Odom { .. } => 40,
            Payload::Scan { beams } => 16 + 4 * *beams as usize,
            Payload::Map { data } => 16 + data.len(),
            Payload::Status(_) => 24,
            Payload::CmdVel { .. } => 16,
            Payload::Lights { .. } => 1,
            Payload::ResetOdom { .. } => 24,
            Payload::Reboot | Payload::CancelNav => 1,
            Payload::NavGoal { .. } => 16,
            Payload::CmdAck { command, .. } => 8 + command.len(),
            Payload::NavStatus { detail, .. } => 4 + detail.len(),
            Payload::MergedMap { data, placements } => 16 + data.len() + placements.len() * 48,
            Payload::MergeStatus { reports } => {
                reports.iter().map(|r| 48 + r.rover.len() + r.detail.len()).sum::<usize>() + 4
            }
            Payload::Bytes(b) => b.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: Topic,
    pub publisher: String,
    pub qos: Qos,
    /// Per (publisher, topic), starting at 1.
    pub seq: u64,
    pub sent_at: f64,
    pub payload_bytes: usize,
    pub payload: Payload,
}

/// Periodic presence message flooded by every powered node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Announcement {
    pub node: String,
    pub namespaces: Vec<String>,
    pub topics: Vec<Topic>,
    pub subscriptions: Vec<Pattern>,
    /// Subscriptions held on behalf of another node, which the announcer
    /// stores and forwards to.
    pub proxied: Vec<(String, Pattern)>,
}

impl Announcement {
    pub fn wire_size(&self) -> usize {
        8 + self.node.len()
            + self.namespaces.iter().map(|n| n.len() + 1).sum::<usize>()
            + self.topics.iter().map(|t| t.namespace.len() + t.name.len() + 2).sum::<usize>()
            + self.subscriptions.iter().map(Pattern::wire_len).sum::<usize>()
            + self.proxied.iter().map(|(n, p)| n.len() + 1 + p.wire_len()).sum::<usize>()
    }
}

/// One fragment of a message on its way to `final_dst`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub envelope: Arc<Envelope>,
    pub final_dst: usize,
    /// Reliable stream sequence of the message on this hop.
    pub stream: Option<u64>,
    /// Lowest stream the sender still holds; anything older was given up.
    pub base: u64,
    pub msg_id: u64,
    pub index: u16,
    pub count: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Packet {
    Data(Fragment),
    Ack { stream: u64, index: u16 },
    Announce(Arc<Announcement>),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topic_parsing() {
        assert_eq!(Topic::parse("leo1/odom").unwrap(), Topic::new("leo1", "odom"));
        assert!(Topic::parse("odom").is_err());
        assert!(Topic::parse("*/odom").is_err());
        assert!(Topic::parse("a/b/c").is_err());
        assert_eq!(Pattern::parse("*/status").unwrap(), Pattern::AnyNamespace("status".into()));
        assert!(Pattern::parse("*/").is_err());
    }

    #[test]
    fn namespace_isolation() {
        let p = Pattern::parse("leo2/cmd_vel").unwrap();
        assert!(!p.matches(&Topic::new("leo1", "cmd_vel")));
        assert!(p.matches(&Topic::new("leo2", "cmd_vel")));
        let any = Pattern::parse("*/cmd_vel").unwrap();
        assert!(any.matches(&Topic::new("leo1", "cmd_vel")));
        assert!(!any.matches(&Topic::new("leo1", "odom")));
    }
}
