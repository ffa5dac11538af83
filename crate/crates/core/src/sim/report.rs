//! Per-window results, run summaries and their CSV/JSON forms.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::transport::LinkStats;
use super::{SimConfig, SimError};
use crate::encoding::DecodedStats;
use crate::policy::{AggregateFunction, Scope, StreamSchema};
use crate::ring_crypto::StreamCiphertext;
use crate::secure_agg::{setup_bytes_per_controller, MASKED_HEADER_LEN};
use crate::token::wire;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum PlanStatus {
    Success,
    /// More streams dropped than the plan tolerates.
    Quorum { dropped: usize, tolerated: u64 },
    NoMembers,
    /// Tokens still missing after every retry.
    TokenTimeout { missing: usize },
    Error(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldResult {
    pub attribute: String,
    pub function: AggregateFunction,
    pub stats: DecodedStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanOutcome {
    pub plan: usize,
    pub query: String,
    pub status: PlanStatus,
    /// Streams included in the output.
    pub streams: usize,
    /// Controllers whose tokens were combined.
    pub controllers: usize,
    pub retries: u32,
    pub fields: Vec<FieldResult>,
    /// Encrypted-path output equals the plaintext shadow.
    pub shadow_equal: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WindowCounters {
    pub prf_calls: u64,
    pub additions: u64,
    pub messages: u64,
    pub bytes_producer: u64,
    pub bytes_controller: u64,
    pub bytes_server: u64,
}

/// Wall-clock seconds per phase; excluded from determinism checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub encode: f64,
    pub encrypt: f64,
    pub token: f64,
    pub unmask: f64,
    pub plain: f64,
}

impl PhaseTimings {
    /// Encrypted-path time over plaintext-path time; both include encoding.
    pub fn overhead_factor(&self) -> f64 {
        let plain = self.encode + self.plain;
        if plain > 0.0 {
            (self.encode + self.encrypt + self.token + self.unmask) / plain
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowResult {
    pub window: u64,
    pub outcomes: Vec<PlanOutcome>,
    /// Distinct streams included in at least one output.
    pub members: usize,
    pub counters: WindowCounters,
    pub timings: PhaseTimings,
}

impl WindowResult {
    pub fn succeeded(&self) -> bool {
        self.outcomes.iter().all(|o| o.status == PlanStatus::Success)
    }

    pub fn shadow_equal(&self) -> bool {
        self.outcomes.iter().all(|o| o.status != PlanStatus::Success || o.shadow_equal)
    }

    pub fn status(&self) -> String {
        let ok = self.outcomes.iter().filter(|o| o.status == PlanStatus::Success).count();
        match ok {
            n if n == self.outcomes.len() => "ok".into(),
            0 => "failed".into(),
            n => format!("partial {n}/{}", self.outcomes.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanInfo {
    pub query: String,
    pub scope: Scope,
    pub population: u64,
    pub controllers: usize,
    pub fault_tolerance: u64,
    /// `None` when a single controller holds every stream.
    pub protocol: Option<String>,
    pub epoch_bits: Option<u32>,
    pub released_slots: usize,
    pub dp_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub event_width: usize,
    pub producer_event_bytes: usize,
    pub heartbeat_bytes: usize,
    pub setup_bytes_per_controller: u64,
    pub setup_bytes_total: u64,
    /// Masked token of a population plan releasing every element.
    pub masked_token_bytes: usize,
}

/// Byte counts per message class from the wire formats.
pub fn measure_bandwidth(config: &SimConfig, schema: &StreamSchema) -> BandwidthReport {
    let w = schema.event_width();
    let n = config.controller_count();
    let per = setup_bytes_per_controller(n.saturating_sub(1));
    BandwidthReport {
        event_width: w,
        producer_event_bytes: event_payload_bytes(w),
        heartbeat_bytes: super::engine::HEARTBEAT_REPLY_LEN,
        setup_bytes_per_controller: per,
        setup_bytes_total: per * n as u64,
        masked_token_bytes: MASKED_HEADER_LEN + wire::HEADER_LEN + wire::PAIR_LEN * w,
    }
}

/// Size of one encrypted event: two timestamps and eight bytes per element.
pub fn event_payload_bytes(width: usize) -> usize {
    StreamCiphertext {
        t_curr: Default::default(),
        t_prev: Default::default(),
        body: vec![Default::default(); width],
    }
    .wire_len()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub scenario: String,
    pub config: SimConfig,
    pub plans: Vec<PlanInfo>,
    pub windows: Vec<WindowResult>,
    pub links: BTreeMap<String, LinkStats>,
    pub bandwidth: BandwidthReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimSummary {
    pub scenario: String,
    pub windows: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub shadow_equal: bool,
    pub mean_overhead_factor: f64,
    pub totals: WindowCounters,
    pub plans: Vec<PlanInfo>,
    pub links: BTreeMap<String, LinkStats>,
    pub bandwidth: BandwidthReport,
    pub fingerprint: String,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "window",
    "status",
    "members",
    "prf_calls",
    "additions",
    "bytes_producer",
    "bytes_controller",
    "bytes_server",
    "t_encrypt",
    "t_token",
    "t_unmask",
    "overhead_factor",
];

impl SimReport {
    pub fn succeeded(&self) -> usize {
        self.windows.iter().filter(|w| w.succeeded()).count()
    }

    pub fn all_shadow_equal(&self) -> bool {
        self.windows.iter().all(WindowResult::shadow_equal)
    }

    /// Hash of every result field except wall-clock timings.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.windows {
            let mut w = w.clone();
            w.timings = PhaseTimings::default();
            h.update(serde_json::to_vec(&w).expect("results serialize"));
        }
        h.update(serde_json::to_vec(&self.links).expect("stats serialize"));
        hex::encode(h.finalize())
    }

    pub fn summary(&self) -> SimSummary {
        let mut totals = WindowCounters::default();
        for w in &self.windows {
            let c = &w.counters;
            totals.prf_calls += c.prf_calls;
            totals.additions += c.additions;
            totals.messages += c.messages;
            totals.bytes_producer += c.bytes_producer;
            totals.bytes_controller += c.bytes_controller;
            totals.bytes_server += c.bytes_server;
        }
        let overheads: Vec<f64> = self.windows.iter().map(|w| w.timings.overhead_factor()).collect();
        SimSummary {
            scenario: self.scenario.clone(),
            windows: self.windows.len(),
            succeeded: self.succeeded(),
            failed: self.windows.len() - self.succeeded(),
            shadow_equal: self.all_shadow_equal(),
            mean_overhead_factor: overheads.iter().sum::<f64>() / overheads.len().max(1) as f64,
            totals,
            plans: self.plans.clone(),
            links: self.links.clone(),
            bandwidth: self.bandwidth.clone(),
            fingerprint: self.fingerprint(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.windows {
            let c = &r.counters;
            let t = &r.timings;
            w.write_record([
                r.window.to_string(),
                r.status(),
                r.members.to_string(),
                c.prf_calls.to_string(),
                c.additions.to_string(),
                c.bytes_producer.to_string(),
                c.bytes_controller.to_string(),
                c.bytes_server.to_string(),
                format!("{:.6}", t.encrypt),
                format!("{:.6}", t.token),
                format!("{:.6}", t.unmask),
                format!("{:.3}", t.overhead_factor()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json<W: Write>(&self, out: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(out, &self.summary()).map_err(|e| SimError::Output(e.to_string()))
    }

    pub fn write_results_json<W: Write>(&self, out: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(out, &self.windows).map_err(|e| SimError::Output(e.to_string()))
    }
}
