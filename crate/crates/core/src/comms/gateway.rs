//! Store-and-forward queue at the gateway node.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::types::{Envelope, Qos};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub host: String,
    pub remote: String,
    pub capacity_bytes: usize,
    /// How often the host checks its remote link, seconds.
    pub tick_s: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            host: "lander".into(),
            remote: "ground_station".into(),
            capacity_bytes: 16 << 20,
            tick_s: 0.25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Queued {
    pub envelope: Arc<Envelope>,
    pub final_dst: usize,
    pub bytes: usize,
}

/// FIFO of envelopes bound across the gateway link.
#[derive(Clone, Debug)]
pub struct GatewayBuffer {
    pub capacity_bytes: usize,
    queue: VecDeque<Queued>,
    bytes: usize,
    pub dropped_best_effort: u64,
    /// Reliable envelopes accepted beyond capacity.
    pub overflow_events: u64,
    pub peak_bytes: usize,
}

/// Result of an enqueue that did not fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overflow {
    /// Best-effort envelopes were evicted, oldest first.
    DroppedBestEffort(u64),
    /// Only reliable envelopes were left; the buffer runs over capacity.
    ReliableOverCapacity { queued: usize },
}

impl GatewayBuffer {
    pub fn new(capacity_bytes: usize) -> Self {
        GatewayBuffer {
            capacity_bytes,
            queue: VecDeque::new(),
            bytes: 0,
            dropped_best_effort: 0,
            overflow_events: 0,
            peak_bytes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn push(&mut self, q: Queued) -> Option<Overflow> {
        let mut dropped = 0;
        while self.bytes + q.bytes > self.capacity_bytes {
            let Some(k) = self.queue.iter().position(|x| x.envelope.qos == Qos::BestEffort) else { break };
            let gone = self.queue.remove(k).expect("index");
            self.bytes -= gone.bytes;
            dropped += 1;
        }
        let over = self.bytes + q.bytes > self.capacity_bytes;
        if over && q.envelope.qos == Qos::BestEffort {
            self.dropped_best_effort += dropped + 1;
            return Some(Overflow::DroppedBestEffort(dropped + 1));
        }
        self.bytes += q.bytes;
        self.queue.push_back(q);
        self.peak_bytes = self.peak_bytes.max(self.bytes);
        self.dropped_best_effort += dropped;
        if over {
            self.overflow_events += 1;
            return Some(Overflow::ReliableOverCapacity { queued: self.queue.len() });
        }
        (dropped > 0).then_some(Overflow::DroppedBestEffort(dropped))
    }

    pub fn pop(&mut self) -> Option<Queued> {
        let q = self.queue.pop_front()?;
        self.bytes -= q.bytes;
        Some(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::types::{Payload, Topic};

    fn env(qos: Qos, seq: u64) -> Arc<Envelope> {
        Arc::new(Envelope {
            topic: Topic::new("leo1", "odom"),
            publisher: "leo1".into(),
            qos,
            seq,
            sent_at: 0.0,
            payload_bytes: 36,
            payload: Payload::Bytes(Arc::new(vec![0; 36])),
        })
    }

    fn q(qos: Qos, seq: u64) -> Queued {
        Queued { envelope: env(qos, seq), final_dst: 0, bytes: 100 }
    }

    #[test]
    fn evicts_oldest_best_effort() {
        let mut b = GatewayBuffer::new(300);
        b.push(q(Qos::BestEffort, 1));
        b.push(q(Qos::Reliable, 2));
        b.push(q(Qos::BestEffort, 3));
        assert_eq!(b.push(q(Qos::BestEffort, 4)), Some(Overflow::DroppedBestEffort(1)));
        assert_eq!(b.dropped_best_effort, 1);
        let seqs: Vec<u64> = std::iter::from_fn(|| b.pop()).map(|x| x.envelope.seq).collect();
        assert_eq!(seqs, vec![2, 3, 4]);
    }

    #[test]
    fn reliable_is_never_dropped() {
        let mut b = GatewayBuffer::new(200);
        b.push(q(Qos::Reliable, 1));
        b.push(q(Qos::Reliable, 2));
        assert_eq!(b.push(q(Qos::Reliable, 3)), Some(Overflow::ReliableOverCapacity { queued: 3 }));
        assert_eq!(b.len(), 3);
        assert_eq!(b.overflow_events, 1);
        assert_eq!(b.push(q(Qos::BestEffort, 4)), Some(Overflow::DroppedBestEffort(1)));
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn empty_buffer_pops_nothing() {
        let mut b = GatewayBuffer::new(10);
        assert!(b.pop().is_none());
        assert!(b.is_empty());
    }
}
