//! Gateway wire protocol between the backend and operator consoles.
//!
//! Every message is a 4-byte big-endian length followed by that many bytes
//! of UTF-8 JSON holding one object with a `type` field. See
//! `docs/protocol.md` for the schema.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{BandwidthReport, Command, GroundStation, RoverView, TickerEvent};
use crate::comms::NamespaceEntry;
use crate::geometry::Pose2;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 16 << 20;
pub const GRID_ENCODING: &str = "ogr1-rle";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("frame is not UTF-8")]
    NotUtf8,
    #[error("bad message: {0}")]
    BadMessage(String),
}

pub fn write_frame<W: Write>(w: &mut W, body: &str) -> Result<(), ProtocolError> {
    if body.len() > MAX_FRAME {
        return Err(ProtocolError::TooLarge(body.len()));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<String>, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(ProtocolError::TooLarge(n));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map(Some).map_err(|_| ProtocolError::NotUtf8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBlob {
    pub version: u64,
    pub encoding: String,
    /// Base64 of the grid wire encoding.
    pub data: String,
}

impl GridBlob {
    pub fn new(version: u64, bytes: &[u8]) -> GridBlob {
        GridBlob {
            version,
            encoding: GRID_ENCODING.to_string(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn bytes(&self) -> Result<Vec<u8>, ProtocolError> {
        base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| ProtocolError::BadMessage(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoverTelemetry {
    #[serde(flatten)]
    pub view: RoverView,
    pub map: Option<GridBlob>,
    /// Ground-truth pose, only in omniscient mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Pose2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub sim_time: f64,
    pub paused: bool,
    pub realtime_factor: f64,
    pub selection: Option<String>,
    pub selection_live: bool,
    pub namespaces: Vec<NamespaceEntry>,
    pub rovers: BTreeMap<String, RoverTelemetry>,
    pub merged_map: Option<GridBlob>,
    pub bandwidth: BandwidthReport,
    pub ticker: Vec<TickerEvent>,
}

impl Snapshot {
    pub fn capture(gs: &GroundStation, sim_time: f64, paused: bool, realtime_factor: f64) -> Snapshot {
        let rovers = gs
            .fleet
            .rovers
            .iter()
            .map(|(k, v)| {
                let map = v.map.as_ref().map(|m| GridBlob::new(v.map_version, m));
                (k.clone(), RoverTelemetry { view: v.clone(), map, truth: None })
            })
            .collect();
        Snapshot {
            sim_time,
            paused,
            realtime_factor,
            selection: gs.selection().map(str::to_string),
            selection_live: gs.selection_live(),
            namespaces: gs.fleet.namespaces.clone(),
            rovers,
            merged_map: gs.fleet.merged_map.as_ref().map(|m| GridBlob::new(gs.fleet.merged_version, m)),
            bandwidth: gs.bandwidth_report(10.0, sim_time),
            ticker: gs.ticker().cloned().collect(),
        }
    }
}

/// Operator input carried by a `command` message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientCommand {
    Select { name: Option<String> },
    Teleop { v: f64, w: f64 },
    Lights { on: bool },
    ResetOdom { x: f64, y: f64, theta: f64 },
    Reboot,
    NavGoal { x: f64, y: f64 },
    CancelNav,
}

impl ClientCommand {
    /// The rover command, or `None` for a selection change.
    pub fn rover_command(&self) -> Option<Command> {
        Some(match *self {
            ClientCommand::Select { .. } => return None,
            ClientCommand::Teleop { v, w } => Command::Teleop { v, w },
            ClientCommand::Lights { on } => Command::Lights { on },
            ClientCommand::ResetOdom { x, y, theta } => Command::ResetOdom { x, y, theta },
            ClientCommand::Reboot => Command::Reboot,
            ClientCommand::NavGoal { x, y } => Command::NavGoal { x, y },
            ClientCommand::CancelNav => Command::CancelNav,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Hello {
        #[serde(default)]
        client: Option<String>,
    },
    Command {
        command: ClientCommand,
    },
    Pause,
    Resume,
    SetRate {
        #[serde(default)]
        realtime_factor: Option<f64>,
        #[serde(default)]
        snapshot_hz: Option<f64>,
    },
}

impl ClientMsg {
    pub fn parse(text: &str) -> Result<ClientMsg, ProtocolError> {
        let msg: ClientMsg = serde_json::from_str(text).map_err(|e| ProtocolError::BadMessage(e.to_string()))?;
        if let ClientMsg::SetRate { realtime_factor, snapshot_hz } = &msg {
            let bad = |v: &Option<f64>| v.is_some_and(|x| !(x.is_finite() && x > 0.0));
            if bad(realtime_factor) || bad(snapshot_hz) {
                return Err(ProtocolError::BadMessage("rates must be positive".into()));
            }
        }
        Ok(msg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello { protocol: u32, sim_time: f64 },
    Snapshot(Box<Snapshot>),
    /// Top-level snapshot fields that changed; `rovers` holds only changed rovers.
    Delta { sim_time: f64, changes: Map<String, Value> },
    Error { message: String },
}

impl ServerMsg {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Fields of `next` that differ from `prev`. Both are snapshot objects.
pub fn diff(prev: &Value, next: &Value) -> Map<String, Value> {
    let mut out = Map::new();
    let (Some(p), Some(n)) = (prev.as_object(), next.as_object()) else {
        return next.as_object().cloned().unwrap_or_default();
    };
    for (k, v) in n {
        if p.get(k) == Some(v) {
            continue;
        }
        if k == "rovers" {
            let mut changed = Map::new();
            let old = p.get(k).and_then(Value::as_object);
            for (name, r) in v.as_object().into_iter().flatten() {
                if old.and_then(|o| o.get(name)) != Some(r) {
                    changed.insert(name.clone(), r.clone());
                }
            }
            out.insert(k.clone(), Value::Object(changed));
        } else {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

/// Applies a delta the way a console does.
pub fn apply_delta(base: &mut Value, changes: &Map<String, Value>) {
    let Some(obj) = base.as_object_mut() else { return };
    for (k, v) in changes {
        if k == "rovers" {
            let rovers = obj.entry(k.clone()).or_insert_with(|| Value::Object(Map::new()));
            if let (Some(r), Some(upd)) = (rovers.as_object_mut(), v.as_object()) {
                for (name, val) in upd {
                    r.insert(name.clone(), val.clone());
                }
            }
        } else {
            obj.insert(k.clone(), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, "{\"type\":\"pause\"}").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 16]);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), "{\"type\":\"pause\"}");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn client_messages_parse() {
        assert_eq!(ClientMsg::parse(r#"{"type":"pause"}"#).unwrap(), ClientMsg::Pause);
        let m = ClientMsg::parse(r#"{"type":"command","command":{"kind":"teleop","v":0.2,"w":0.0}}"#).unwrap();
        let ClientMsg::Command { command } = m else { panic!() };
        assert_eq!(command.rover_command(), Some(Command::Teleop { v: 0.2, w: 0.0 }));
        let m = ClientMsg::parse(r#"{"type":"command","command":{"kind":"select","name":"leo2"}}"#).unwrap();
        assert_eq!(m, ClientMsg::Command { command: ClientCommand::Select { name: Some("leo2".into()) } });
        assert!(ClientMsg::parse(r#"{"type":"launch"}"#).is_err());
        assert!(ClientMsg::parse(r#"{"type":"set_rate","realtime_factor":-1}"#).is_err());
        assert!(ClientMsg::parse("not json").is_err());
    }

    #[test]
    fn delta_carries_only_changes() {
        let a = json!({"sim_time": 1.0, "paused": false, "rovers": {"leo1": {"x": 1}, "leo2": {"x": 2}}});
        let b = json!({"sim_time": 2.0, "paused": false, "rovers": {"leo1": {"x": 1}, "leo2": {"x": 3}}});
        let d = diff(&a, &b);
        assert_eq!(Value::Object(d.clone()), json!({"sim_time": 2.0, "rovers": {"leo2": {"x": 3}}}));
        let mut c = a.clone();
        apply_delta(&mut c, &d);
        assert_eq!(c, b);
    }
}
