//! Secure aggregation of transformation tokens across privacy controllers.
//!
//! Each controller adds a nonce built from pairwise PRF masks to its partial
//! token; the masks cancel in the sum over all participating controllers, so
//! the server learns only the aggregate token.

pub mod bench;
pub mod connectivity;
mod keys;
mod masking;
mod party;

pub use connectivity::{disconnect_bound, optimize_b, OptimizationResult};
pub use keys::{
    setup_bytes_per_controller, setup_pairwise, IdentityRegistry, KeyAgreement, PairwiseSecret,
    PartyKeypair, PUBLIC_KEY_LEN,
};
pub use masking::{add_correction, mask_token, unmask_aggregate, MaskedToken, MASKED_HEADER_LEN};
pub use party::{
    DreamThreshold, EpochPlan, EpochShape, Party, Protocol, MAX_EPOCH_ID, MAX_NONCE_WIDTH,
    PRF_OUTPUT_BITS,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::PartyId;
use crate::token::TokenError;

#[derive(Debug, Error, PartialEq)]
pub enum SecAggError {
    #[error("unknown peer {}", .0.to_hex())]
    UnknownPeer(PartyId),

    #[error("segment width b must be in 1..=128, got {0}")]
    SegmentWidth(u32),

    #[error("epoch id {0} exceeds 2^48 - 1")]
    EpochId(u64),

    #[error("nonce width must be in 1..={max}, got {0}", max = MAX_NONCE_WIDTH)]
    NonceWidth(usize),

    #[error("round {round} is outside the epoch of {rounds} rounds")]
    RoundOutOfEpoch { round: u64, rounds: u128 },

    #[error("membership delta for round {round} arrived after round {last}")]
    StaleDelta { round: u64, last: u64 },

    #[error("party {} is both joining and dropping", .0.to_hex())]
    ConflictingDelta(PartyId),

    #[error("masked tokens belong to different rounds")]
    RoundMismatch,

    #[error("no configuration with n >= 2 reaches the bound: N = {party_count}, alpha = {alpha}, delta = {delta}")]
    Infeasible {
        party_count: u64,
        alpha: f64,
        delta: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed encoding: {0}")]
    Malformed(&'static str),

    #[error(transparent)]
    Token(#[from] TokenError),
}

/// Per-party cost accounting. `additions` counts ring additions into the
/// nonce, one per element per mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub prf_calls: u64,
    pub additions: u64,
}

impl std::ops::AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        self.prf_calls += o.prf_calls;
        self.additions += o.additions;
    }
}

/// Change of the participating set, effective from `round`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipDelta {
    pub round: u64,
    pub joined: BTreeSet<PartyId>,
    pub dropped: BTreeSet<PartyId>,
}

impl MembershipDelta {
    pub fn new(round: u64) -> Self {
        MembershipDelta {
            round,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.joined.is_empty() && self.dropped.is_empty()
    }

    pub fn validate(&self) -> Result<(), SecAggError> {
        match self.joined.intersection(&self.dropped).next() {
            Some(p) => Err(SecAggError::ConflictingDelta(*p)),
            None => Ok(()),
        }
    }

    /// `round u64 | joined u32 | dropped u32 | ids [u8; 32]...`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.joined.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dropped.len() as u32).to_le_bytes());
        for id in self.joined.iter().chain(&self.dropped) {
            out.extend_from_slice(&id.0);
        }
        out
    }

    pub fn wire_len(&self) -> usize {
        16 + 32 * (self.joined.len() + self.dropped.len())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SecAggError> {
        if bytes.len() < 16 {
            return Err(SecAggError::Malformed("short delta header"));
        }
        let round = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let joined = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dropped = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let total = joined
            .checked_add(dropped)
            .and_then(|n| n.checked_mul(32))
            .and_then(|n| n.checked_add(16));
        if total != Some(bytes.len()) {
            return Err(SecAggError::Malformed("delta length does not match counts"));
        }
        let mut ids = bytes[16..]
            .chunks_exact(32)
            .map(|c| PartyId(c.try_into().unwrap()));
        let (jn, dn) = (joined, dropped);
        let joined: BTreeSet<_> = ids.by_ref().take(jn).collect();
        let dropped: BTreeSet<_> = ids.collect();
        if joined.len() != jn || dropped.len() != dn {
            return Err(SecAggError::Malformed("duplicate party id in delta"));
        }
        let delta = MembershipDelta {
            round,
            joined,
            dropped,
        };
        delta.validate()?;
        Ok(delta)
    }
}
