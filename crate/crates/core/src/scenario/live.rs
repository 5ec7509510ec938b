//! Interactive runs: operator input from the gateway is applied between
//! kernel steps, and snapshots go out at a wall-clock rate.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::metrics::MetricsLog;
use super::sim::Simulation;
use crate::ground_station::protocol::{ClientCommand, ClientMsg};
use crate::ground_station::server::GatewayServer;

/// Pause state and held input. Commands that arrive while paused are
/// applied in arrival order on resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingress {
    pub paused: bool,
    pub realtime_factor: f64,
    pub snapshot_hz: f64,
    held: VecDeque<ClientCommand>,
}

impl Ingress {
    pub fn new(realtime_factor: f64, snapshot_hz: f64) -> Ingress {
        Ingress { paused: false, realtime_factor, snapshot_hz, held: VecDeque::new() }
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }

    /// Commands to apply now, in order.
    pub fn accept(&mut self, msg: ClientMsg) -> Vec<ClientCommand> {
        match msg {
            ClientMsg::Hello { .. } => Vec::new(),
            ClientMsg::Pause => {
                self.paused = true;
                Vec::new()
            }
            ClientMsg::Resume => {
                self.paused = false;
                self.held.drain(..).collect()
            }
            ClientMsg::SetRate { realtime_factor, snapshot_hz } => {
                if let Some(r) = realtime_factor {
                    self.realtime_factor = r;
                }
                if let Some(h) = snapshot_hz {
                    self.snapshot_hz = h;
                }
                Vec::new()
            }
            ClientMsg::Command { command } if self.paused => {
                self.held.push_back(command);
                Vec::new()
            }
            ClientMsg::Command { command } => vec![command],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub realtime_factor: f64,
    pub snapshot_hz: f64,
    pub start_paused: bool,
    /// Set from outside to end the run early.
    pub stop: Arc<AtomicBool>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { realtime_factor: 1.0, snapshot_hz: 5.0, start_paused: false, stop: Arc::new(AtomicBool::new(false)) }
    }
}

/// Runs the simulation paced against the wall clock until it ends or is stopped.
pub fn serve(mut sim: Simulation, server: &GatewayServer, opts: &ServeOptions) -> MetricsLog {
    let mut ingress = Ingress::new(opts.realtime_factor, opts.snapshot_hz);
    ingress.paused = opts.start_paused;
    let mut last_step = Instant::now();
    let mut last_snapshot: Option<Instant> = None;
    loop {
        for inbound in server.drain() {
            for cmd in ingress.accept(inbound.msg) {
                if let Err(e) = sim.apply_operator(&cmd) {
                    log::info!("operator command refused: {e}");
                }
            }
        }
        let elapsed = last_step.elapsed().as_secs_f64();
        last_step = Instant::now();
        if !ingress.paused {
            let target = sim.now() + elapsed * ingress.realtime_factor;
            sim.advance(target);
        }
        let due = last_snapshot.is_none_or(|t| t.elapsed().as_secs_f64() >= 1.0 / ingress.snapshot_hz);
        if due {
            server.publish(&sim.snapshot(ingress.paused, ingress.realtime_factor));
            last_snapshot = Some(Instant::now());
        }
        if sim.done() || opts.stop.load(Ordering::SeqCst) {
            server.publish(&sim.snapshot(ingress.paused, ingress.realtime_factor));
            break;
        }
        thread::sleep(Duration::from_millis(5));
    }
    sim.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paused_input_is_held_in_order() {
        let mut ing = Ingress::new(1.0, 5.0);
        assert!(ing.accept(ClientMsg::Pause).is_empty());
        let a = ClientCommand::Select { name: Some("leo1".into()) };
        let b = ClientCommand::Lights { on: true };
        assert!(ing.accept(ClientMsg::Command { command: a.clone() }).is_empty());
        assert!(ing.accept(ClientMsg::SetRate { realtime_factor: Some(4.0), snapshot_hz: None }).is_empty());
        assert!(ing.accept(ClientMsg::Command { command: b.clone() }).is_empty());
        assert_eq!(ing.realtime_factor, 4.0);
        assert_eq!(ing.held(), 2);
        assert_eq!(ing.accept(ClientMsg::Resume), vec![a, b.clone()]);
        assert_eq!(ing.accept(ClientMsg::Command { command: b.clone() }), vec![b]);
    }
}
