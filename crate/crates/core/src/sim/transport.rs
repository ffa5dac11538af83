//! Virtual clock, event queue and simulated links.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::config::TransportConfig;

/// Virtual time in microseconds.
pub type Micros = u64;

struct Scheduled<E> {
    at: Micros,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // min-heap on (time, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Discrete-event queue. Events at equal times pop in insertion order.
pub struct Scheduler<E> {
    heap: BinaryHeap<Scheduled<E>>,
    seq: u64,
    now: Micros,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Scheduler {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
        }
    }
}

impl<E> Scheduler<E> {
    pub fn now(&self) -> Micros {
        self.now
    }

    /// Schedules `event` at `at`, or now if `at` lies in the past.
    pub fn schedule(&mut self, at: Micros, event: E) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at: at.max(self.now),
            seq: self.seq,
            event,
        });
    }

    pub fn pop(&mut self) -> Option<(Micros, E)> {
        let s = self.heap.pop()?;
        self.now = s.at;
        Some((s.at, s.event))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    ProducerToServer,
    ServerToController,
    ControllerToServer,
}

impl LinkClass {
    pub fn name(self) -> &'static str {
        match self {
            LinkClass::ProducerToServer => "producer_to_server",
            LinkClass::ServerToController => "server_to_controller",
            LinkClass::ControllerToServer => "controller_to_server",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub sent: u64,
    pub received: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
}

/// Samples latency and loss from a single seeded stream; sends must be
/// issued in a deterministic order.
pub struct SimTransport {
    config: TransportConfig,
    rng: ChaCha20Rng,
    stats: BTreeMap<LinkClass, LinkStats>,
}

impl SimTransport {
    pub fn new(config: TransportConfig, rng: ChaCha20Rng) -> Self {
        SimTransport {
            config,
            rng,
            stats: BTreeMap::new(),
        }
    }

    /// Returns the arrival time, or `None` if the message is lost.
    pub fn send(&mut self, class: LinkClass, now: Micros, bytes: usize) -> Option<Micros> {
        let s = self.stats.entry(class).or_default();
        s.sent += 1;
        s.bytes_sent += bytes as u64;
        let lossy = class != LinkClass::ProducerToServer;
        if lossy && self.config.drop_prob > 0.0 && self.rng.gen_bool(self.config.drop_prob) {
            s.dropped += 1;
            return None;
        }
        let lo = (self.config.latency_min_ms * 1000.0) as u64;
        let hi = (self.config.latency_max_ms * 1000.0) as u64;
        let latency = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
        Some(now + latency)
    }

    pub fn delivered(&mut self, class: LinkClass) {
        self.stats.entry(class).or_default().received += 1;
    }

    pub fn stats(&self) -> &BTreeMap<LinkClass, LinkStats> {
        &self.stats
    }
}
