//! Scenario files: TOML with every section optional except `seed`,
//! `duration_s` and at least one `[[rovers]]` entry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::CommsParams;
use crate::geometry::Vec2;
use crate::ground_station::{GroundStationParams, GLOBAL_NS};
use crate::mapping::MergeParams;
use crate::meshnet::NetParams;
use crate::navigation::{FollowerParams, PlannerParams};
use crate::rover::RoverConfig;
use crate::world::{load_world, ArenaSpec};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct SpecError {
    pub line: Option<usize>,
    pub message: String,
}

impl SpecError {
    fn new(line: Option<usize>, message: impl Into<String>) -> SpecError {
        SpecError { line, message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanderSpec {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub merge_period_s: f64,
    /// Accepted rovers are registered again after this many merge cycles.
    pub reregister_cycles: u32,
    pub merge: MergeParams,
}

impl Default for LanderSpec {
    fn default() -> Self {
        LanderSpec {
            name: "lander".into(),
            x: 25.0,
            y: 18.0,
            merge_period_s: 10.0,
            reregister_cycles: 30,
            merge: MergeParams::default(),
        }
    }
}

/// The ground station hangs off the lander on a fixed link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundStationSpec {
    pub name: String,
    pub rate_bps: f64,
    pub frame_error: f64,
    /// One-way delay added to every frame on the ground link.
    pub delay_s: f64,
    pub operator: GroundStationParams,
}

impl Default for GroundStationSpec {
    fn default() -> Self {
        GroundStationSpec {
            name: "ground_station".into(),
            rate_bps: 2e6,
            frame_error: 0.0,
            delay_s: 1.0,
            operator: GroundStationParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetrySpec {
    pub control_hz: f64,
    pub status_period_s: f64,
    pub scan_period_s: f64,
    pub map_period_s: f64,
    /// Teleop deadman.
    pub teleop_timeout_s: f64,
    pub gs_refresh_s: f64,
    pub metrics_period_s: f64,
    /// Teleop stream rate of scripted operator input.
    pub teleop_hz: f64,
}

impl Default for TelemetrySpec {
    fn default() -> Self {
        TelemetrySpec {
            control_hz: 5.0,
            status_period_s: 1.0,
            scan_period_s: 1.0,
            map_period_s: 5.0,
            teleop_timeout_s: 0.5,
            gs_refresh_s: 1.0,
            metrics_period_s: 60.0,
            teleop_hz: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutonomySpec {
    pub planner: PlannerParams,
    pub follower: FollowerParams,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoverSpec {
    pub name: String,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub v_max: Option<f64>,
    /// Rovers listed as unpowered wait for a `power_on_rover` event.
    #[serde(default = "yes")]
    pub powered: bool,
    #[serde(default)]
    pub headlights: bool,
}

fn lander_name() -> String {
    "lander".into()
}
fn gs_name() -> String {
    "ground_station".into()
}
fn leg_timeout() -> f64 {
    600.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimedEvent {
    /// Takes every link between `a` and `b` down; `*` matches any node.
    Blackout {
        at: f64,
        duration_s: f64,
        #[serde(default = "lander_name")]
        a: String,
        #[serde(default = "gs_name")]
        b: String,
    },
    ShutdownRover {
        at: f64,
        rover: String,
    },
    PowerOnRover {
        at: f64,
        rover: String,
    },
    DisableAutonomy {
        at: f64,
        rover: String,
    },
    RebootRover {
        at: f64,
        rover: String,
    },
    /// Operator selects the rover and sends a goal in the merged-map frame.
    ScriptGoal {
        at: f64,
        rover: String,
        x: f64,
        y: f64,
    },
    /// Goals sent one after another; the next leg starts when the rover
    /// reports the goal reached or failed, or after `leg_timeout_s`.
    ScriptRoute {
        at: f64,
        rover: String,
        waypoints: Vec<[f64; 2]>,
        #[serde(default = "leg_timeout")]
        leg_timeout_s: f64,
    },
    /// Operator streams a fixed twist, then a stop.
    ScriptTeleop {
        at: f64,
        rover: String,
        v: f64,
        w: f64,
        duration_s: f64,
    },
    ScriptLights {
        at: f64,
        rover: String,
        on: bool,
    },
}

impl TimedEvent {
    pub fn at(&self) -> f64 {
        match *self {
            TimedEvent::Blackout { at, .. }
            | TimedEvent::ShutdownRover { at, .. }
            | TimedEvent::PowerOnRover { at, .. }
            | TimedEvent::DisableAutonomy { at, .. }
            | TimedEvent::RebootRover { at, .. }
            | TimedEvent::ScriptGoal { at, .. }
            | TimedEvent::ScriptRoute { at, .. }
            | TimedEvent::ScriptTeleop { at, .. }
            | TimedEvent::ScriptLights { at, .. } => at,
        }
    }

    pub fn rover(&self) -> Option<&str> {
        match self {
            TimedEvent::Blackout { .. } => None,
            TimedEvent::ShutdownRover { rover, .. }
            | TimedEvent::PowerOnRover { rover, .. }
            | TimedEvent::DisableAutonomy { rover, .. }
            | TimedEvent::RebootRover { rover, .. }
            | TimedEvent::ScriptGoal { rover, .. }
            | TimedEvent::ScriptRoute { rover, .. }
            | TimedEvent::ScriptTeleop { rover, .. }
            | TimedEvent::ScriptLights { rover, .. } => Some(rover),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub world: ArenaSpec,
    #[serde(default)]
    pub lander: LanderSpec,
    #[serde(default)]
    pub ground_station: GroundStationSpec,
    #[serde(default)]
    pub net: NetParams,
    #[serde(default)]
    pub comms: CommsParams,
    /// Shared by every rover; `v_max` can be overridden per rover.
    #[serde(default)]
    pub rover: RoverConfig,
    #[serde(default)]
    pub autonomy: AutonomySpec,
    #[serde(default)]
    pub telemetry: TelemetrySpec,
    pub rovers: Vec<RoverSpec>,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
}

/// 1-based line of byte offset `pos`.
fn line_of(src: &str, pos: usize) -> usize {
    src[..pos.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of the `n`-th `[[header]]` table, if the file uses that form.
fn nth_table_line(src: &str, header: &str, n: usize) -> Option<usize> {
    let tag = format!("[[{header}]]");
    src.lines().enumerate().filter(|(_, l)| l.trim_start().starts_with(&tag)).nth(n).map(|(i, _)| i + 1)
}

fn key_line(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| l.trim_start().starts_with(key)).map(|i| i + 1)
}

pub fn parse_scenario(src: &str) -> Result<ScenarioSpec, SpecError> {
    let spec: ScenarioSpec = toml::from_str(src).map_err(|e| {
        let line = e.span().map(|s| line_of(src, s.start));
        SpecError::new(line, e.message().to_string())
    })?;
    spec.validate_with(Some(src))?;
    Ok(spec)
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        self.validate_with(None)
    }

    fn validate_with(&self, src: Option<&str>) -> Result<(), SpecError> {
        let rover_line = |i: usize| src.and_then(|s| nth_table_line(s, "rovers", i));
        let event_line = |i: usize| src.and_then(|s| nth_table_line(s, "events", i));
        let key = |k: &str| src.and_then(|s| key_line(s, k));

        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(SpecError::new(key("duration_s"), "duration_s must be positive"));
        }
        let world = load_world(&self.world).map_err(|e| SpecError::new(key("[world]"), e.to_string()))?;
        let inside = |x: f64, y: f64| {
            let p = Vec2::new(x, y);
            self.world.contains(p) && !world.occupied_at(p)
        };
        let lander = &self.lander;
        if !inside(lander.x, lander.y) {
            return Err(SpecError::new(key("[lander]"), "lander must sit on free ground inside the arena"));
        }
        if !(lander.merge_period_s > 0.0) {
            return Err(SpecError::new(key("[lander]"), "merge_period_s must be positive"));
        }
        let gs = &self.ground_station;
        if gs.name == lander.name {
            return Err(SpecError::new(key("[ground_station]"), "ground station and lander need distinct names"));
        }
        if !(gs.rate_bps > 0.0 && gs.delay_s >= 0.0 && (0.0..1.0).contains(&gs.frame_error)) {
            return Err(SpecError::new(key("[ground_station]"), "bad ground link parameters"));
        }
        let t = &self.telemetry;
        for (name, v) in [
            ("control_hz", t.control_hz),
            ("status_period_s", t.status_period_s),
            ("scan_period_s", t.scan_period_s),
            ("map_period_s", t.map_period_s),
            ("teleop_timeout_s", t.teleop_timeout_s),
            ("gs_refresh_s", t.gs_refresh_s),
            ("metrics_period_s", t.metrics_period_s),
            ("teleop_hz", t.teleop_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SpecError::new(key(name), format!("{name} must be positive")));
            }
        }

        if self.rovers.is_empty() {
            return Err(SpecError::new(None, "at least one rover is required"));
        }
        let reserved = [lander.name.as_str(), gs.name.as_str(), GLOBAL_NS];
        for (i, r) in self.rovers.iter().enumerate() {
            let line = rover_line(i);
            let valid_name = !r.name.is_empty()
                && r.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !valid_name {
                return Err(SpecError::new(line, format!("bad rover name {:?}", r.name)));
            }
            if reserved.contains(&r.name.as_str()) {
                return Err(SpecError::new(line, format!("rover name {} is reserved", r.name)));
            }
            if self.rovers[..i].iter().any(|o| o.name == r.name) {
                return Err(SpecError::new(line, format!("rover {} is defined twice", r.name)));
            }
            if !(r.x.is_finite() && r.y.is_finite() && r.theta.is_finite()) || !inside(r.x, r.y) {
                return Err(SpecError::new(
                    line,
                    format!("rover {} starts at ({}, {}), not free ground inside the arena", r.name, r.x, r.y),
                ));
            }
            if r.v_max.is_some_and(|v| !(v > 0.0)) {
                return Err(SpecError::new(line, format!("rover {} v_max must be positive", r.name)));
            }
        }

        let node_known = |n: &str| n == "*" || reserved[..2].contains(&n) || self.rovers.iter().any(|r| r.name == n);
        for (i, ev) in self.events.iter().enumerate() {
            let line = event_line(i);
            let at = ev.at();
            if !(at.is_finite() && (0.0..=self.duration_s).contains(&at)) {
                return Err(SpecError::new(line, format!("event time {at} outside [0, duration_s]")));
            }
            if let Some(r) = ev.rover() {
                if !self.rovers.iter().any(|x| x.name == r) {
                    return Err(SpecError::new(line, format!("unknown rover {r}")));
                }
            }
            match ev {
                TimedEvent::Blackout { duration_s, a, b, .. } => {
                    if !(*duration_s > 0.0) {
                        return Err(SpecError::new(line, "blackout duration_s must be positive"));
                    }
                    for n in [a, b] {
                        if !node_known(n) {
                            return Err(SpecError::new(line, format!("unknown node {n}")));
                        }
                    }
                }
                TimedEvent::ScriptRoute { waypoints, leg_timeout_s, .. } => {
                    if waypoints.is_empty() {
                        return Err(SpecError::new(line, "route has no waypoints"));
                    }
                    if !(*leg_timeout_s > 0.0) {
                        return Err(SpecError::new(line, "leg_timeout_s must be positive"));
                    }
                    if let Some(w) = waypoints.iter().find(|w| !self.world.contains(Vec2::new(w[0], w[1]))) {
                        return Err(SpecError::new(line, format!("waypoint ({}, {}) outside the arena", w[0], w[1])));
                    }
                }
                TimedEvent::ScriptGoal { x, y, .. } => {
                    if !self.world.contains(Vec2::new(*x, *y)) {
                        return Err(SpecError::new(line, format!("goal ({x}, {y}) outside the arena")));
                    }
                }
                TimedEvent::ScriptTeleop { v, w, duration_s, .. } => {
                    if !(v.is_finite() && w.is_finite() && *duration_s > 0.0) {
                        return Err(SpecError::new(line, "teleop needs finite v, w and a positive duration_s"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 1\nduration_s = 60\n\n[[rovers]]\nname = \"leo1\"\nx = 20\ny = 18\n";

    #[test]
    fn minimal_spec_fills_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.world.width_m, 50.0);
        assert_eq!(s.ground_station.delay_s, 1.0);
        assert_eq!(s.lander.name, "lander");
        assert!(s.rovers[0].powered);
        assert!(s.events.is_empty());
    }

    #[test]
    fn duplicate_rover_reports_its_line() {
        let src = format!("{MINIMAL}\n[[rovers]]\nname = \"leo1\"\nx = 21\ny = 18\n");
        let e = parse_scenario(&src).unwrap_err();
        assert_eq!(e.line, Some(9));
        assert!(e.message.contains("twice"));
    }

    #[test]
    fn unknown_field_reports_its_line() {
        let src = format!("{MINIMAL}colour = \"red\"\n");
        let e = parse_scenario(&src).unwrap_err();
        assert_eq!(e.line, Some(8));
    }

    #[test]
    fn bad_pose_is_rejected() {
        let src = MINIMAL.replace("x = 20", "x = 80");
        assert!(parse_scenario(&src).unwrap_err().message.contains("arena"));
    }

    #[test]
    fn events_are_checked() {
        let src = format!("{MINIMAL}\n[[events]]\nkind = \"shutdown_rover\"\nat = 10\nrover = \"leo9\"\n");
        let e = parse_scenario(&src).unwrap_err();
        assert_eq!(e.line, Some(9));
        let src = format!("{MINIMAL}\n[[events]]\nkind = \"shutdown_rover\"\nat = 100\nrover = \"leo1\"\n");
        assert!(parse_scenario(&src).is_err());
        let src = format!("{MINIMAL}\n[[events]]\nkind = \"blackout\"\nat = 10\nduration_s = 5\n");
        let s = parse_scenario(&src).unwrap();
        assert_eq!(s.events[0], TimedEvent::Blackout { at: 10.0, duration_s: 5.0, a: "lander".into(), b: "ground_station".into() });
    }
}
