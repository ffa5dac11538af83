//! Transformation tokens: key material that, added to an encrypted
//! aggregate, reveals exactly one transformation output.

mod dp;
mod layout;
mod store;
pub mod wire;

pub use dp::{add_dp_noise, BudgetLedger, NoiseOutcome, NoiseSpec, PrivacyBudget};
pub use layout::{ElementDirective, OutputLayout, Slot};
pub use store::{TokenKey, TokenStore};

use rand::Rng;
use std::collections::BTreeSet;
use thiserror::Error;

use crate::ids::{StreamId, StreamSetId};
use crate::ring_crypto::{MasterSecret, Modulus, RingElement, StreamCipher, StreamCiphertext, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("directive list is empty")]
    EmptyDirectives,

    #[error("window start {start} must precede end {end}")]
    EmptyWindow { start: Timestamp, end: Timestamp },

    #[error("tokens cover different windows")]
    WindowMismatch,

    #[error("tokens release different element patterns")]
    PatternMismatch,

    #[error("no tokens to combine")]
    NoTokens,

    #[error("stream {0} appears in more than one partial token")]
    OverlappingMembers(StreamId),

    #[error("token membership is unknown (decoded from the wire)")]
    UnknownMembers,

    #[error("token is already noised")]
    AlreadyNoised,

    #[error("epsilon cost must be positive, got {0}")]
    NonPositiveCost(f64),

    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),

    #[error("every element is withheld")]
    NothingReleased,

    #[error("malformed token encoding: {0}")]
    Malformed(&'static str),

    #[error("a different token was already issued for this window")]
    AlreadyIssued,
}

/// Key material for one transformation output over a window range.
///
/// `elements` has one entry per output slot of the token's layout; `None`
/// marks a withheld slot. `members` is kept in memory to combine partial
/// tokens and is not part of the wire encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformationToken {
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub stream_set_id: StreamSetId,
    pub members: BTreeSet<StreamId>,
    pub elements: Vec<Option<RingElement>>,
    pub noised: bool,
}

impl TransformationToken {
    pub fn released_count(&self) -> usize {
        self.elements.iter().filter(|e| e.is_some()).count()
    }

    fn pattern(&self) -> Vec<bool> {
        self.elements.iter().map(Option::is_some).collect()
    }
}

/// Builds the token for window `(window.0, window.1]` of one stream.
///
/// Released slot `s` carries `sum_{j in s} (k_start[j] - k_end[j])`, plus the
/// directive's constant shift or sampled perturbation.
pub fn single_stream_token<R: Rng + ?Sized>(
    cipher: &StreamCipher,
    master: &MasterSecret,
    window: (Timestamp, Timestamp),
    directives: &[ElementDirective],
    rng: &mut R,
) -> Result<TransformationToken, TokenError> {
    let (start, end) = window;
    if start >= end {
        return Err(TokenError::EmptyWindow { start, end });
    }
    let layout = OutputLayout::from_directives(directives)?;
    let key = cipher.bind(master);
    let width = directives.len();
    let k_end = key.derive(end, width);
    let k_start = key.derive(start, width);
    let m = cipher.modulus;
    let deltas: Vec<RingElement> = k_start
        .elements
        .iter()
        .zip(&k_end.elements)
        .map(|(s, e)| m.sub(*s, *e))
        .collect();
    let mut elements = layout.project_keys(&deltas, m);
    let mut noised = false;
    for (slot, value) in layout.slots().iter().zip(elements.iter_mut()) {
        let (Slot::Single(j), Some(v)) = (slot, value.as_mut()) else {
            continue;
        };
        match &directives[*j] {
            ElementDirective::Shift(c) => *v = m.add(*v, m.from_i64(*c)),
            ElementDirective::Perturb(spec) => {
                *v = m.add(*v, spec.sample(rng, m)?);
                noised = true;
            }
            _ => {}
        }
    }
    Ok(TransformationToken {
        window_start: start,
        window_end: end,
        stream_set_id: StreamSetId::single(master.stream_id()),
        members: BTreeSet::from([master.stream_id().clone()]),
        elements,
        noised,
    })
}

/// Controller-local combination of the window tokens of several streams.
pub fn multi_stream_partial(
    tokens: &[TransformationToken],
    modulus: Modulus,
) -> Result<TransformationToken, TokenError> {
    let first = tokens.first().ok_or(TokenError::NoTokens)?;
    let mut members = BTreeSet::new();
    let mut elements = first.elements.clone();
    for (i, t) in tokens.iter().enumerate() {
        if (t.window_start, t.window_end) != (first.window_start, first.window_end) {
            return Err(TokenError::WindowMismatch);
        }
        if t.pattern() != first.pattern() {
            return Err(TokenError::PatternMismatch);
        }
        if t.members.is_empty() {
            return Err(TokenError::UnknownMembers);
        }
        for s in &t.members {
            if !members.insert(s.clone()) {
                return Err(TokenError::OverlappingMembers(s.clone()));
            }
        }
        if i > 0 {
            for (acc, v) in elements.iter_mut().zip(&t.elements) {
                if let (Some(a), Some(v)) = (acc.as_mut(), v) {
                    *a = modulus.add(*a, *v);
                }
            }
        }
    }
    Ok(TransformationToken {
        window_start: first.window_start,
        window_end: first.window_end,
        stream_set_id: StreamSetId::of(&members),
        members,
        elements,
        noised: tokens.iter().any(|t| t.noised),
    })
}

/// Server side of a window aggregation: a chained sum of one stream's
/// ciphertexts, or a cross-stream sum of window aggregates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedAggregate {
    pub ciphertext: StreamCiphertext,
    pub members: BTreeSet<StreamId>,
}

impl EncryptedAggregate {
    pub fn stream_set_id(&self) -> StreamSetId {
        StreamSetId::of(&self.members)
    }
}

#[cfg(test)]
mod tests;
