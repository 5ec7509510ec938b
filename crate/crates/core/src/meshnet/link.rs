//! Link quality curve and the airtime metrics.

use serde::{Deserialize, Serialize};

/// Piecewise-constant rate over distance, with a quartic frame error curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkCurve {
    /// `(max distance m, rate bit/s)`, ascending by distance. The last
    /// breakpoint is the radio range.
    pub steps: Vec<(f64, f64)>,
    pub error_exponent: f64,
    pub max_error: f64,
}

impl Default for LinkCurve {
    fn default() -> Self {
        LinkCurve {
            steps: vec![(50.0, 54e6), (100.0, 24e6), (150.0, 12e6), (200.0, 6e6), (220.0, 2e6)],
            error_exponent: 4.0,
            max_error: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkQuality {
    pub rate_bps: f64,
    pub e_f: f64,
    pub up: bool,
}

impl LinkCurve {
    pub fn range(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.0)
    }

    pub fn quality(&self, distance: f64) -> LinkQuality {
        let range = self.range();
        match self.steps.iter().find(|(d, _)| distance <= *d) {
            Some(&(_, rate)) => LinkQuality {
                rate_bps: rate,
                e_f: (distance / range).powf(self.error_exponent).min(self.max_error),
                up: true,
            },
            None => LinkQuality { rate_bps: 0.0, e_f: self.max_error, up: false },
        }
    }
}

/// Link quality under the default curve.
pub fn link_quality(distance: f64) -> LinkQuality {
    LinkCurve::default().quality(distance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetParams {
    /// Channel and protocol overhead per attempt, seconds.
    pub overhead_s: f64,
    /// Test frame size used by the metric, bits.
    pub test_frame_bits: f64,
    pub ewma_alpha: f64,
    /// Weight of the load term in the refined metric.
    pub load_weight: f64,
    /// Proactive refresh period of routes in use, seconds.
    pub preq_interval_s: f64,
    /// Lifetime of an unused route entry, seconds.
    pub route_ttl_s: f64,
    pub retry_limit: u32,
    pub link_sample_period_s: f64,
    /// Hop limit of path requests.
    pub max_hops: u32,
    pub preq_bytes: usize,
    pub prep_bytes: usize,
    pub curve: LinkCurve,
}

impl Default for NetParams {
    fn default() -> Self {
        NetParams {
            overhead_s: 1e-4,
            test_frame_bits: 8192.0,
            ewma_alpha: 0.25,
            load_weight: 1.0,
            preq_interval_s: 5.0,
            route_ttl_s: 10.0,
            retry_limit: 4,
            link_sample_period_s: 1.0,
            max_hops: 16,
            preq_bytes: 37,
            prep_bytes: 31,
            curve: LinkCurve::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub rate_bps: f64,
    pub e_f: f64,
    pub per_ewma: f64,
    /// Share of the last sample period the link carried frames.
    pub load: f64,
    pub up: bool,
    /// One-way latency added per traversal, seconds.
    pub extra_delay_s: f64,
    /// Fixed links ignore distance.
    pub fixed: bool,
}

impl LinkState {
    pub fn from_distance(a: usize, b: usize, distance: f64, curve: &LinkCurve) -> LinkState {
        let q = curve.quality(distance);
        LinkState {
            a,
            b,
            distance,
            rate_bps: q.rate_bps,
            e_f: q.e_f,
            per_ewma: 0.0,
            load: 0.0,
            up: q.up,
            extra_delay_s: 0.0,
            fixed: false,
        }
    }

    pub fn fixed(a: usize, b: usize, rate_bps: f64, e_f: f64, extra_delay_s: f64) -> LinkState {
        LinkState {
            a,
            b,
            distance: 0.0,
            rate_bps,
            e_f,
            per_ewma: 0.0,
            load: 0.0,
            up: true,
            extra_delay_s,
            fixed: true,
        }
    }

    /// Seconds on air for one attempt of `bits`.
    pub fn attempt_time(&self, bits: f64, params: &NetParams) -> f64 {
        params.overhead_s + bits / self.rate_bps
    }
}

/// Baseline airtime cost, seconds. Down links cost infinity.
pub fn airtime(link: &LinkState, params: &NetParams) -> f64 {
    if !link.up || link.rate_bps <= 0.0 {
        return f64::INFINITY;
    }
    (params.overhead_s + params.test_frame_bits / link.rate_bps) / (1.0 - link.e_f)
}

/// Airtime with the smoothed error rate and a load penalty.
pub fn airtime_plus(link: &LinkState, params: &NetParams) -> f64 {
    if !link.up || link.rate_bps <= 0.0 || link.per_ewma >= 1.0 {
        return f64::INFINITY;
    }
    (params.overhead_s + params.test_frame_bits / link.rate_bps) / (1.0 - link.per_ewma)
        * (1.0 + params.load_weight * link.load)
}

pub fn update_per(link: &mut LinkState, failed: bool, alpha: f64) {
    let x = if failed { 1.0 } else { 0.0 };
    link.per_ewma = alpha * x + (1.0 - alpha) * link.per_ewma;
}
