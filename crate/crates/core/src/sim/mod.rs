//! In-process deployment: producers, privacy controllers and the server
//! exchange messages over simulated links on a virtual clock.

mod config;
mod engine;
mod presets;
mod report;
mod transport;

#[cfg(test)]
mod tests;

pub use config::{ProtocolChoice, SimConfig, TransportConfig};
pub use engine::{default_annotation, run_preset, run_scenario, HEARTBEAT_REPLY_LEN};
pub use presets::{scenario_presets, Scenario, PRESET_NAMES};
pub use report::{
    event_payload_bytes, measure_bandwidth, BandwidthReport, FieldResult, PhaseTimings, PlanInfo, PlanOutcome,
    PlanStatus, SimReport, SimSummary, WindowCounters, WindowResult, CSV_COLUMNS,
};
pub use transport::{LinkClass, LinkStats, Micros, Scheduler, SimTransport};

use thiserror::Error;

use crate::encoding::EncodingError;
use crate::policy::{PolicyError, Refusal};
use crate::ring_crypto::CryptoError;
use crate::secure_agg::SecAggError;
use crate::token::TokenError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error("plan for query `{query}` refused: {reason}")]
    PlanRefused { query: String, reason: Refusal },

    #[error(transparent)]
    SecAgg(#[from] SecAggError),

    #[error(transparent)]
    Crypto(#[from] CryptoError),

    #[error(transparent)]
    Token(#[from] TokenError),

    #[error(transparent)]
    Encoding(#[from] EncodingError),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("output: {0}")]
    Output(String),
}
