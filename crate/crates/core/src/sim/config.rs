//! Scenario configuration.

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::ring_crypto::PrfKind;
pub use crate::secure_agg::bench::ProtocolChoice;
use crate::secure_agg::KeyAgreement;

/// Latency is uniform in `[latency_min_ms, latency_max_ms]`. Messages on
/// controller links are lost with probability `drop_prob`; producer links
/// are reliable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub drop_prob: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            latency_min_ms: 1.0,
            latency_max_ms: 20.0,
            drop_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub producers: usize,
    /// Controllers; 0 means one per producer. Producer `i` belongs to
    /// controller `i % controllers`.
    pub controllers: usize,
    pub window_ms: u64,
    pub grace_ms: u64,
    /// Mean events per second of each producer's Poisson process.
    pub event_rate_hz: f64,
    /// Fixed values emitted by every producer in every window, evenly
    /// spaced, instead of random data.
    pub values: Option<Vec<f64>>,
    pub protocol: ProtocolChoice,
    pub alpha: f64,
    pub delta: f64,
    /// Per-window probability that a controller misses the heartbeat.
    pub dropout: f64,
    /// Per-window probability that a producer is offline.
    pub producer_dropout: f64,
    pub seed: u64,
    pub windows: u64,
    pub transport: TransportConfig,
    pub prf: PrfKind,
    pub key_agreement: KeyAgreement,
    /// Fraction of a plan's population allowed to drop per window.
    pub fault_tolerance: f64,
    pub dp_delta: f64,
    /// Extra membership-delta rounds after lost tokens.
    pub max_retries: u32,
    /// Shard party computations across threads within each phase.
    pub parallel: bool,
    /// Controllers per scheduling partition; only affects processing order
    /// in parallel mode.
    pub partition_size: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            producers: 10,
            controllers: 0,
            window_ms: 10_000,
            grace_ms: 5_000,
            event_rate_hz: 0.5,
            values: None,
            protocol: ProtocolChoice::Zeph,
            alpha: 0.5,
            delta: 1e-7,
            dropout: 0.0,
            producer_dropout: 0.0,
            seed: 0,
            windows: 20,
            transport: TransportConfig::default(),
            prf: PrfKind::Aes128,
            key_agreement: KeyAgreement::X25519,
            fault_tolerance: 0.1,
            dp_delta: 1e-6,
            max_retries: 2,
            parallel: false,
            partition_size: 100,
        }
    }
}

impl SimConfig {
    pub fn controller_count(&self) -> usize {
        if self.controllers == 0 {
            self.producers
        } else {
            self.controllers
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if self.producers == 0 {
            return bad("producers must be at least 1");
        }
        if self.controller_count() > self.producers {
            return bad("more controllers than producers");
        }
        if self.window_ms == 0 || self.windows == 0 {
            return bad("window_ms and windows must be positive");
        }
        if self.grace_ms >= self.window_ms {
            return bad("grace_ms must be below window_ms");
        }
        let t = &self.transport;
        if !(t.latency_min_ms >= 0.0 && t.latency_min_ms <= t.latency_max_ms) {
            return bad("latency bounds must satisfy 0 <= min <= max");
        }
        // every phase gets grace/2 for a round trip
        if 2.0 * t.latency_max_ms >= self.grace_ms as f64 / 2.0 {
            return bad("latency_max_ms must be below grace_ms / 4");
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("producer_dropout", self.producer_dropout),
            ("transport.drop_prob", t.drop_prob),
            ("fault_tolerance", self.fault_tolerance),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("alpha must lie in [0, 1) and delta in (0, 1)");
        }
        if !(self.dp_delta > 0.0 && self.dp_delta < 1.0) {
            return bad("dp_delta must lie in (0, 1)");
        }
        if self.values.is_none() && !(self.event_rate_hz > 0.0 && self.event_rate_hz.is_finite()) {
            return bad("event_rate_hz must be positive");
        }
        if self.values.as_ref().is_some_and(|v| v.len() as u64 >= self.window_ms * 1000) {
            return bad("too many fixed values for one window");
        }
        if self.partition_size == 0 {
            return bad("partition_size must be positive");
        }
        Ok(())
    }

    pub(crate) fn window_us(&self) -> u64 {
        self.window_ms * 1000
    }

    pub(crate) fn grace_us(&self) -> u64 {
        self.grace_ms * 1000
    }
}
