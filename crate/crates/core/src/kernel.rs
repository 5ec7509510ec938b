//! Deterministic discrete-event kernel.
//!
//! Time is kept as an integer count of microseconds so that event ordering
//! never depends on floating point comparisons. Everything public speaks
//! seconds as `f64`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const MICROS_PER_SEC: f64 = 1_000_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("cannot schedule at {at}s, clock is already at {now}s")]
    PastTime { at: f64, now: f64 },
    #[error("time {0} is not a finite non-negative number of seconds")]
    InvalidTime(f64),
    #[error("rng label must not be empty")]
    EmptyLabel,
    #[error("rng label {0:?} was already forked")]
    DuplicateLabel(String),
}

/// Simulated time in whole microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    /// Nearest microsecond.
    pub fn from_secs(secs: f64) -> Result<Self, KernelError> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(KernelError::InvalidTime(secs));
        }
        Ok(SimTime((secs * MICROS_PER_SEC).round() as u64))
    }

    /// Rounds up, so a delay is never shortened by quantization.
    pub fn duration_ceil(secs: f64) -> SimTime {
        if !secs.is_finite() || secs <= 0.0 {
            return SimTime(0);
        }
        SimTime((secs * MICROS_PER_SEC).ceil() as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC
    }

    pub fn saturating_add(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(other.0))
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn after_secs(self, secs: f64) -> SimTime {
        self.saturating_add(SimTime::duration_ceil(secs))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs())
    }
}

/// Handle for cancelling a scheduled event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ticket {
    at: SimTime,
    seq: u64,
}

impl Ticket {
    pub fn fire_at(&self) -> SimTime {
        self.at
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }
}

/// An event popped from the queue.
#[derive(Debug)]
pub struct Fired<E> {
    pub at: SimTime,
    pub seq: u64,
    pub target: &'static str,
    pub payload: E,
}

struct Entry<E> {
    target: &'static str,
    payload: E,
}

/// Executed `(fire_at, seq, target)` triples, folded into a running digest.
pub struct EventLog {
    hasher: Sha256,
    count: u64,
    recorded: Option<Vec<(SimTime, u64, &'static str)>>,
}

impl EventLog {
    fn new() -> Self {
        EventLog { hasher: Sha256::new(), count: 0, recorded: None }
    }

    fn append(&mut self, at: SimTime, seq: u64, target: &'static str) {
        self.hasher.update(at.as_micros().to_le_bytes());
        self.hasher.update(seq.to_le_bytes());
        self.hasher.update(target.as_bytes());
        self.hasher.update([0u8]);
        self.count += 1;
        if let Some(rec) = self.recorded.as_mut() {
            rec.push((at, seq, target));
        }
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn entries(&self) -> Option<&[(SimTime, u64, &'static str)]> {
        self.recorded.as_deref()
    }
}

/// A deterministic random stream keyed by `(root seed, label)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(root_seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(root_seed.to_le_bytes());
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        RngStream { label: label.to_string(), rng: ChaCha8Rng::from_seed(key) }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.rng.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        self.uniform() < p
    }

    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z * sigma
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Single-threaded event scheduler with a seeded RNG registry.
pub struct Kernel<E> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), Entry<E>>,
    log: EventLog,
    root_seed: u64,
    forked: HashSet<String>,
}

impl<E> Kernel<E> {
    pub fn new(root_seed: u64) -> Self {
        Kernel {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
            log: EventLog::new(),
            root_seed,
            forked: HashSet::new(),
        }
    }

    /// Keep every executed triple in memory, not just the digest.
    pub fn record_log(&mut self) {
        if self.log.recorded.is_none() {
            self.log.recorded = Some(Vec::new());
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn now_secs(&self) -> f64 {
        self.now.as_secs()
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn schedule(&mut self, at_secs: f64, target: &'static str, payload: E) -> Result<Ticket, KernelError> {
        if at_secs.is_finite() && at_secs < self.now.as_secs() {
            return Err(KernelError::PastTime { at: at_secs, now: self.now.as_secs() });
        }
        let at = SimTime::from_secs(at_secs)?;
        self.schedule_at(at, target, payload)
    }

    pub fn schedule_at(&mut self, at: SimTime, target: &'static str, payload: E) -> Result<Ticket, KernelError> {
        if at < self.now {
            return Err(KernelError::PastTime { at: at.as_secs(), now: self.now.as_secs() });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), Entry { target, payload });
        Ok(Ticket { at, seq })
    }

    /// Schedules `delay_secs` from now, rounding the delay up to the next microsecond.
    pub fn schedule_in(&mut self, delay_secs: f64, target: &'static str, payload: E) -> Ticket {
        let at = self.now.after_secs(delay_secs);
        self.schedule_at(at, target, payload).expect("future time")
    }

    pub fn cancel(&mut self, ticket: Ticket) -> bool {
        self.queue.remove(&(ticket.at, ticket.seq)).is_some()
    }

    pub fn next_fire_time(&self) -> Option<SimTime> {
        self.queue.keys().next().map(|(t, _)| *t)
    }

    /// Pops the earliest event if it fires no later than `until`.
    pub fn pop_due(&mut self, until: SimTime) -> Option<Fired<E>> {
        let (&(at, seq), _) = self.queue.iter().next()?;
        if at > until {
            return None;
        }
        let entry = self.queue.remove(&(at, seq)).expect("present");
        self.now = at;
        self.log.append(at, seq, entry.target);
        Some(Fired { at, seq, target: entry.target, payload: entry.payload })
    }

    /// Moves the clock forward without executing anything. Never moves backwards.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Runs every event with `fire_at <= t_end` and leaves the clock at `t_end`.
    pub fn run_until<F>(&mut self, t_end_secs: f64, mut handler: F) -> usize
    where
        F: FnMut(&mut Kernel<E>, Fired<E>),
    {
        let until = SimTime::from_secs(t_end_secs.max(self.now.as_secs())).unwrap_or(self.now);
        let mut n = 0;
        while let Some(ev) = self.pop_due(until) {
            handler(self, ev);
            n += 1;
        }
        self.advance_to(until);
        n
    }

    pub fn fork_rng(&mut self, label: &str) -> Result<RngStream, KernelError> {
        if label.is_empty() {
            return Err(KernelError::EmptyLabel);
        }
        if !self.forked.insert(label.to_string()) {
            return Err(KernelError::DuplicateLabel(label.to_string()));
        }
        Ok(RngStream::new(self.root_seed, label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_time_runs_in_insertion_order() {
        let mut k: Kernel<u32> = Kernel::new(1);
        k.schedule(1.0, "t", 1).unwrap();
        k.schedule(1.0, "t", 2).unwrap();
        k.schedule(0.5, "t", 0).unwrap();
        let mut seen = Vec::new();
        k.run_until(2.0, |_, ev| seen.push(ev.payload));
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn event_at_now_precedes_later_events() {
        let mut k: Kernel<&str> = Kernel::new(1);
        k.schedule(0.000001, "t", "later").unwrap();
        k.schedule(0.0, "t", "now").unwrap();
        let mut seen = Vec::new();
        k.run_until(1.0, |_, ev| seen.push(ev.payload));
        assert_eq!(seen, vec!["now", "later"]);
    }

    #[test]
    fn past_scheduling_is_rejected() {
        let mut k: Kernel<()> = Kernel::new(1);
        k.run_until(5.0, |_, _| {});
        let err = k.schedule(4.0, "t", ()).unwrap_err();
        assert!(matches!(err, KernelError::PastTime { .. }));
        assert!(k.schedule(-1.0, "t", ()).is_err());
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut k: Kernel<()> = Kernel::new(1);
        assert_eq!(k.run_until(10.0, |_, _| {}), 0);
        assert_eq!(k.now_secs(), 10.0);
    }

    #[test]
    fn run_until_is_inclusive() {
        let mut k: Kernel<u8> = Kernel::new(1);
        for t in [1.0, 2.0, 3.0] {
            k.schedule(t, "t", 0).unwrap();
        }
        assert_eq!(k.run_until(2.0, |_, _| {}), 2);
        assert_eq!(k.pending(), 1);
        assert_eq!(k.now_secs(), 2.0);
    }

    #[test]
    fn cancel_removes_exactly_one() {
        let mut k: Kernel<u8> = Kernel::new(1);
        let a = k.schedule(1.0, "t", 1).unwrap();
        k.schedule(1.0, "t", 2).unwrap();
        assert!(k.cancel(a));
        assert!(!k.cancel(a));
        assert_eq!(k.pending(), 1);
        let mut seen = vec![];
        k.run_until(2.0, |_, ev| seen.push(ev.payload));
        assert_eq!(seen, vec![2]);
    }

    #[test]
    fn handlers_can_schedule_followups() {
        let mut k: Kernel<u32> = Kernel::new(1);
        k.schedule(0.0, "t", 0).unwrap();
        let n = k.run_until(1.0, |k, ev| {
            if ev.payload < 9 {
                k.schedule_in(0.1, "t", ev.payload + 1);
            }
        });
        assert_eq!(n, 10);
    }

    #[test]
    fn fork_rng_rules() {
        let mut k: Kernel<()> = Kernel::new(7);
        assert!(matches!(k.fork_rng(""), Err(KernelError::EmptyLabel)));
        let mut a = k.fork_rng("a").unwrap();
        let mut b = k.fork_rng("b").unwrap();
        assert!(matches!(k.fork_rng("a"), Err(KernelError::DuplicateLabel(_))));
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn ceil_duration_never_shortens() {
        assert_eq!(SimTime::duration_ceil(1e-7).as_micros(), 1);
        assert_eq!(SimTime::duration_ceil(1.0).as_micros(), 1_000_000);
        assert_eq!(SimTime::duration_ceil(-3.0).as_micros(), 0);
    }
}
