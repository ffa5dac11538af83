//! Schemas with privacy options, stream annotations, queries, and the query
//! planner with its controller-side counterpart.

mod planner;
mod query;
mod schema;
mod verify;

pub use planner::{
    DpConfig, Operation, OutputField, PlanId, PlanMember, PlannerConfig, QueryPlanner,
    TransformationPlan,
};
pub use query::{parse_query, AggregateFunction, DpRequest, Predicate, Query, Scope, Selection};
pub use schema::{
    parse_annotation, parse_schema, MetadataAttribute, MetadataType, MetadataValue, OptionKind,
    PrivacyOption, StreamAnnotation, StreamAttribute, StreamSchema,
};
pub use verify::{ControllerPolicy, Verdict};

use thiserror::Error;

use crate::ids::{PartyId, StreamId};

/// Why a stream cannot take part in a transformation. Shared by the planner
/// (as a rejection reason) and by controllers (as a refusal reason).
#[derive(Clone, Debug, Error, PartialEq)]
pub enum Refusal {
    #[error("no stream matches the metadata filter")]
    NoMatchingStreams,

    #[error("attribute `{attribute}` is private")]
    Private { attribute: String },

    #[error("option {option} of `{attribute}` does not allow this transformation")]
    OptionMismatch { attribute: String, option: OptionKind },

    #[error("window {requested} ms is below min_window {required} ms of `{attribute}`")]
    MinWindow {
        attribute: String,
        required: u64,
        requested: u64,
    },

    #[error("bucket width {requested} is finer than max_resolution {allowed} of `{attribute}`")]
    MaxResolution {
        attribute: String,
        allowed: f64,
        requested: f64,
    },

    #[error("epsilon {requested} exceeds remaining budget {remaining} of `{attribute}`")]
    Budget {
        attribute: String,
        remaining: f64,
        requested: f64,
    },

    #[error("noise sigma {offered} is below the required {required}")]
    InsufficientNoise { required: f64, offered: f64 },

    #[error("population {population} is below min_population {required}")]
    MinPopulation { required: u64, population: u64 },

    #[error("stream {stream} attribute `{attribute}` is reserved by another transformation")]
    Reserved { stream: StreamId, attribute: String },

    #[error("unknown identity {0}")]
    UnknownIdentity(PartyId),

    #[error("stream {0} is not annotated by this controller")]
    UnknownStream(StreamId),

    #[error("plan does not match its declared content: {0}")]
    PlanMismatch(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid annotation for {0}: {1}")]
    InvalidAnnotation(StreamId, String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("query rejected: {0}")]
    Rejected(Refusal),

    #[error("unknown plan {0}")]
    UnknownPlan(String),
}

/// Durations given as milliseconds or as human-readable strings ("1h", "10s").
pub(crate) mod duration_ms {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ms: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*ms)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Ms(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Ms(ms) => Ok(ms),
            Raw::Text(t) => humantime::parse_duration(&t)
                .map(|d| d.as_millis() as u64)
                .map_err(de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests;
