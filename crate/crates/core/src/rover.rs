//! Rover plant: unicycle kinematics, drifting odometry, a planar range
//! scanner, headlights and power state.
//!
//! The plant knows nothing about the network. The simulation loop calls into
//! it from kernel event handlers and turns its outputs into messages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, Pose2, Vec2};
use crate::kernel::RngStream;
use crate::mapping::Scan;
use crate::world::GroundTruthGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoverError {
    #[error("rover {0} is not powered")]
    NotPowered(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryModel {
    /// Fraction of distance travelled that turns into position error.
    pub drift_rate: f64,
    /// Above this speed the drift rate doubles, m/s.
    pub speed_knee: f64,
    /// Drift above which telemetry reports `odometry_degraded`, meters.
    pub loss_threshold: f64,
}

impl Default for OdometryModel {
    fn default() -> Self {
        OdometryModel { drift_rate: 0.02, speed_knee: 0.05, loss_threshold: 1.0 }
    }
}

impl OdometryModel {
    pub fn rate_at(&self, speed: f64) -> f64 {
        if speed.abs() > self.speed_knee + 1e-12 {
            2.0 * self.drift_rate
        } else {
            self.drift_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub beams: usize,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    /// Range multiplier with the headlights off.
    pub dark_factor: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { beams: 360, max_range: 8.0, range_noise_sigma: 0.02, dark_factor: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoverConfig {
    pub v_max: f64,
    pub omega_max: f64,
    /// Footprint radius used for collision checks, meters.
    pub radius: f64,
    pub reboot_duration_s: f64,
    pub odometry: OdometryModel,
    pub scan: ScanConfig,
}

impl Default for RoverConfig {
    fn default() -> Self {
        RoverConfig {
            v_max: 0.4,
            omega_max: 2.0,
            radius: 0.25,
            reboot_duration_s: 30.0,
            odometry: OdometryModel::default(),
            scan: ScanConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum PowerState {
    On,
    /// Silent until the given simulated time, seconds.
    Rebooting { until: f64 },
    Off,
}

/// Outcome of one drive step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriveOutcome {
    pub distance: f64,
    /// The footprint would have entered an obstacle; the rover stopped short.
    pub blocked: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoverState {
    pub name: String,
    pub true_pose: Pose2,
    pub odom_pose: Pose2,
    /// Commanded (v, omega).
    pub twist: (f64, f64),
    pub headlights: bool,
    pub power: PowerState,
}

impl RoverState {
    pub fn powered(&self) -> bool {
        matches!(self.power, PowerState::On)
    }
}

#[derive(Clone, Debug)]
pub struct Rover {
    pub config: RoverConfig,
    state: RoverState,
    /// Where odometry would be without drift: `odom_frame ∘ true_pose`.
    odom_frame: Pose2,
    /// Drift direction in the odometry frame, fixed between resets.
    drift_dir: f64,
    drift: f64,
    odom_rng: RngStream,
    scan_rng: RngStream,
}

impl Rover {
    /// A powered rover whose odometry starts equal to its true pose.
    pub fn new(name: &str, pose: Pose2, config: RoverConfig, seed: u64) -> Rover {
        let mut odom_rng = RngStream::new(seed, &format!("rover/{name}/odom"));
        let drift_dir = odom_rng.range(-std::f64::consts::PI, std::f64::consts::PI);
        Rover {
            config,
            state: RoverState {
                name: name.to_string(),
                true_pose: pose,
                odom_pose: pose,
                twist: (0.0, 0.0),
                headlights: true,
                power: PowerState::On,
            },
            odom_frame: Pose2::IDENTITY,
            drift_dir,
            drift: 0.0,
            odom_rng,
            scan_rng: RngStream::new(seed, &format!("rover/{name}/scan")),
        }
    }

    pub fn name(&self) -> &str {
        &self.state.name
    }

    pub fn state(&self) -> &RoverState {
        &self.state
    }

    pub fn true_pose(&self) -> Pose2 {
        self.state.true_pose
    }

    pub fn odom_pose(&self) -> Pose2 {
        self.state.odom_pose
    }

    pub fn powered(&self) -> bool {
        self.state.powered()
    }

    pub fn power(&self) -> PowerState {
        self.state.power
    }

    /// Accumulated odometry drift since the last reset, meters.
    pub fn drift(&self) -> f64 {
        self.drift
    }

    /// Distance between the odometry pose and where it would be without drift.
    pub fn odom_error(&self) -> f64 {
        let ideal = self.odom_frame.compose(&self.state.true_pose);
        self.state.odom_pose.position().dist(ideal.position())
    }

    pub fn odometry_degraded(&self) -> bool {
        self.drift > self.config.odometry.loss_threshold
    }

    /// Clamps and latches a drive command. Unpowered rovers drop it.
    pub fn set_twist(&mut self, v: f64, omega: f64) -> Result<(), RoverError> {
        if !self.powered() {
            return Err(RoverError::NotPowered(self.state.name.clone()));
        }
        let v = v.clamp(-self.config.v_max, self.config.v_max);
        let w = omega.clamp(-self.config.omega_max, self.config.omega_max);
        self.state.twist = (v, w);
        Ok(())
    }

    pub fn twist(&self) -> (f64, f64) {
        self.state.twist
    }

    /// Integrates `cmd` for `dt` seconds. With a world, the rover stops short
    /// of obstacles.
    pub fn apply_drive(
        &mut self,
        cmd: (f64, f64),
        dt: f64,
        world: Option<&GroundTruthGrid>,
    ) -> Result<DriveOutcome, RoverError> {
        if !self.powered() {
            return Err(RoverError::NotPowered(self.state.name.clone()));
        }
        self.set_twist(cmd.0, cmd.1)?;
        let (v, w) = self.state.twist;
        if dt <= 0.0 {
            return Ok(DriveOutcome { distance: 0.0, blocked: false });
        }
        let step_len = 0.05;
        let steps = ((v.abs() * dt / step_len).ceil() as usize).max(1);
        let h = dt / steps as f64;
        let mut travelled = 0.0;
        for _ in 0..steps {
            let next = unicycle(self.state.true_pose, v, w, h);
            if let Some(world) = world {
                if v != 0.0 && self.collides(world, next.position()) {
                    self.state.twist = (0.0, 0.0);
                    return Ok(DriveOutcome { distance: travelled, blocked: true });
                }
            }
            self.state.true_pose = next;
            self.state.odom_pose = unicycle(self.state.odom_pose, v, w, h);
            let ds = v.abs() * h;
            if ds > 0.0 {
                let u = self.odom_rng.range(0.5, 1.0);
                let e = self.config.odometry.rate_at(v) * ds * u;
                let dir = Vec2::new(1.0, 0.0).rotate(self.drift_dir);
                self.state.odom_pose.x += dir.x * e;
                self.state.odom_pose.y += dir.y * e;
                self.drift += e;
            }
            travelled += v.abs() * h;
        }
        Ok(DriveOutcome { distance: travelled, blocked: false })
    }

    fn collides(&self, world: &GroundTruthGrid, p: Vec2) -> bool {
        let r = self.config.radius;
        if world.occupied_at(p) {
            return true;
        }
        (0..8).any(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            world.occupied_at(p + Vec2::new(r * a.cos(), r * a.sin()))
        })
    }

    /// Effective censoring range under the current headlight state.
    pub fn effective_range(&self) -> f64 {
        let s = &self.config.scan;
        if self.state.headlights {
            s.max_range
        } else {
            s.max_range * s.dark_factor
        }
    }

    /// One scan from the true pose. Returns `None` when unpowered.
    pub fn sense_scan(&mut self, world: &GroundTruthGrid) -> Option<Scan> {
        if !self.powered() {
            return None;
        }
        let n = self.config.scan.beams.max(1);
        let max_range = self.effective_range();
        let sigma = self.config.scan.range_noise_sigma;
        let pose = self.state.true_pose;
        let mut bearings = Vec::with_capacity(n);
        let mut ranges = Vec::with_capacity(n);
        for k in 0..n {
            let b = normalize_angle(k as f64 * std::f64::consts::TAU / n as f64);
            let hit = world.raycast(pose.position(), pose.theta + b, max_range).ok().flatten();
            let noise = if sigma > 0.0 { self.scan_rng.gaussian(sigma) } else { 0.0 };
            let r = hit.map(|r| (r + noise).max(0.0)).filter(|r| *r <= max_range);
            bearings.push(b);
            ranges.push(r);
        }
        Some(Scan { bearings, ranges, max_range })
    }

    pub fn reset_odometry(&mut self, known: Pose2) -> Result<(), RoverError> {
        if !self.powered() {
            return Err(RoverError::NotPowered(self.state.name.clone()));
        }
        self.state.odom_pose = known;
        self.odom_frame = known.compose(&self.state.true_pose.inverse());
        self.drift = 0.0;
        self.drift_dir = self.odom_rng.range(-std::f64::consts::PI, std::f64::consts::PI);
        Ok(())
    }

    pub fn set_headlights(&mut self, on: bool) -> Result<(), RoverError> {
        if !self.powered() {
            return Err(RoverError::NotPowered(self.state.name.clone()));
        }
        self.state.headlights = on;
        Ok(())
    }

    /// Goes silent until `now + reboot_duration`. Returns the wake-up time.
    pub fn reboot(&mut self, now: f64) -> Result<f64, RoverError> {
        if !self.powered() {
            return Err(RoverError::NotPowered(self.state.name.clone()));
        }
        let until = now + self.config.reboot_duration_s;
        self.state.power = PowerState::Rebooting { until };
        self.state.twist = (0.0, 0.0);
        Ok(until)
    }

    /// Ends a reboot that is due by `now`. State other than the twist is kept.
    pub fn wake(&mut self, now: f64) -> bool {
        match self.state.power {
            PowerState::Rebooting { until } if now + 1e-9 >= until => {
                self.state.power = PowerState::On;
                true
            }
            _ => false,
        }
    }

    /// Brings a rover that was switched off back up.
    pub fn power_on(&mut self) -> bool {
        if self.state.power == PowerState::Off {
            self.state.power = PowerState::On;
            true
        } else {
            false
        }
    }

    pub fn shutdown(&mut self) {
        self.state.power = PowerState::Off;
        self.state.twist = (0.0, 0.0);
    }
}

/// Exact unicycle integration over `dt`.
pub fn unicycle(p: Pose2, v: f64, w: f64, dt: f64) -> Pose2 {
    if w.abs() < 1e-12 {
        let (s, c) = p.theta.sin_cos();
        return Pose2::new(p.x + v * dt * c, p.y + v * dt * s, p.theta);
    }
    let th1 = p.theta + w * dt;
    let r = v / w;
    Pose2::new(
        p.x + r * (th1.sin() - p.theta.sin()),
        p.y - r * (th1.cos() - p.theta.cos()),
        normalize_angle(th1),
    )
}
