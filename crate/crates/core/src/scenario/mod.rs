//! Scenario files, the full simulation, metrics logs, replay and the live
//! operator loop.

mod live;
mod metrics;
mod sim;
mod spec;

use serde_json::Value;
use thiserror::Error;

pub use live::{serve, Ingress, ServeOptions};
pub use metrics::{first_divergence, LogError, MetricsLog, LOG_FORMAT};
pub use sim::{RunOptions, SimEvent, SimState, Simulation};
pub use spec::{
    parse_scenario, AutonomySpec, GroundStationSpec, LanderSpec, RoverSpec, ScenarioSpec, SpecError, TelemetrySpec,
    TimedEvent,
};

use crate::ground_station::protocol::ClientCommand;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log header: {0}")]
    Header(String),
}

/// Runs a scenario headless.
pub fn run(spec: ScenarioSpec, options: RunOptions) -> Result<MetricsLog, ScenarioError> {
    Ok(Simulation::new(spec, options)?.run())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Identical { checksum: String },
    Diverged { line: usize, recorded: String, replayed: String },
}

/// Re-runs the scenario recorded in a log, re-applying logged operator
/// input at the same simulated times, and compares line by line.
pub fn replay(text: &str) -> Result<Verdict, ScenarioError> {
    let log = MetricsLog::parse(text)?;
    let header = log.header().ok_or(LogError::NoHeader)?;
    let spec: ScenarioSpec =
        serde_json::from_value(header["spec"].clone()).map_err(|e| ScenarioError::Header(e.to_string()))?;
    let options: RunOptions =
        serde_json::from_value(header["options"].clone()).map_err(|e| ScenarioError::Header(e.to_string()))?;
    let mut ops = Vec::new();
    for rec in log.records("operator") {
        let t = rec["t"].as_f64().ok_or_else(|| ScenarioError::Header("operator record without t".into()))?;
        let cmd: ClientCommand =
            serde_json::from_value(rec["command"].clone()).map_err(|e| ScenarioError::Header(e.to_string()))?;
        ops.push((t, cmd));
    }
    let mut sim = Simulation::new(spec, options)?;
    for (t, cmd) in &ops {
        sim.advance(*t);
        let _ = sim.apply_operator(cmd);
    }
    let end = sim.duration();
    sim.advance(end);
    let again = sim.finish();
    Ok(match first_divergence(&log, &again) {
        None => Verdict::Identical { checksum: again.checksum().unwrap_or_default().to_string() },
        Some((line, recorded, replayed)) => Verdict::Diverged { line, recorded, replayed },
    })
}

/// Final summary record of a log, if present.
pub fn summary(log: &MetricsLog) -> Option<Value> {
    log.summary()
}
