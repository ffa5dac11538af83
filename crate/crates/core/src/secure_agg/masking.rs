//! Masked partial tokens and their server-side aggregation.

use std::collections::BTreeSet;

use super::{Party, Protocol, SecAggError};
use crate::ids::{PartyId, StreamSetId};
use crate::ring_crypto::Modulus;
use crate::token::{self, TokenError, TransformationToken};

/// `round u64 | epoch u64 | party [u8; 32]`, followed by the token encoding.
pub const MASKED_HEADER_LEN: usize = 8 + 8 + 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedToken {
    pub round: u64,
    pub epoch_id: u64,
    pub party: PartyId,
    pub token: TransformationToken,
}

impl MaskedToken {
    pub fn to_bytes(&self) -> Result<Vec<u8>, SecAggError> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.epoch_id.to_le_bytes());
        out.extend_from_slice(&self.party.0);
        out.extend_from_slice(&token::wire::encode(&self.token)?);
        Ok(out)
    }

    pub fn wire_len(&self) -> usize {
        MASKED_HEADER_LEN + token::wire::encoded_len(&self.token)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SecAggError> {
        if bytes.len() < MASKED_HEADER_LEN {
            return Err(SecAggError::Malformed("short masked-token header"));
        }
        Ok(MaskedToken {
            round: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            epoch_id: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            party: PartyId(bytes[16..48].try_into().unwrap()),
            token: token::wire::decode(&bytes[MASKED_HEADER_LEN..])?,
        })
    }
}

/// Adds the party's nonce for `round` to the released slots of `partial`.
/// The nonce has one element per released slot.
pub fn mask_token(
    party: &mut Party,
    protocol: &Protocol,
    round: u64,
    mut partial: TransformationToken,
    modulus: Modulus,
) -> Result<MaskedToken, SecAggError> {
    let width = partial.released_count();
    let nonce = party.nonce(protocol, round, width)?;
    add_to_released(&mut partial, &nonce, modulus);
    let epoch_id = match protocol {
        Protocol::Zeph { b } => Party::epoch_of(*b, round)?.0,
        _ => 0,
    };
    Ok(MaskedToken {
        round,
        epoch_id,
        party: party.id(),
        token: partial,
    })
}

/// Adds a correction (from [`Party::apply_delta`]) to a masked token.
pub fn add_correction(masked: &mut MaskedToken, correction: &[crate::ring_crypto::RingElement], modulus: Modulus) {
    add_to_released(&mut masked.token, correction, modulus);
}

fn add_to_released(token: &mut TransformationToken, values: &[crate::ring_crypto::RingElement], m: Modulus) {
    for (slot, v) in token.elements.iter_mut().flatten().zip(values) {
        *slot = m.add(*slot, *v);
    }
}

/// Sums the masked tokens of all participating controllers. The masks
/// cancel when the inputs come from exactly the agreed membership.
///
/// `stream_set` names the streams covered by the aggregate; if `None`, the
/// union of the tokens' in-memory members is used.
pub fn unmask_aggregate(
    masked: &[MaskedToken],
    stream_set: Option<StreamSetId>,
    modulus: Modulus,
) -> Result<TransformationToken, SecAggError> {
    let first = masked.first().ok_or(TokenError::NoTokens)?;
    let mut members = BTreeSet::new();
    let mut parties = BTreeSet::new();
    let mut elements = first.token.elements.clone();
    for (i, mt) in masked.iter().enumerate() {
        if (mt.round, mt.epoch_id) != (first.round, first.epoch_id) {
            return Err(SecAggError::RoundMismatch);
        }
        let t = &mt.token;
        if (t.window_start, t.window_end) != (first.token.window_start, first.token.window_end) {
            return Err(TokenError::WindowMismatch.into());
        }
        if t.elements.len() != elements.len()
            || t.elements.iter().zip(&elements).any(|(a, b)| a.is_some() != b.is_some())
        {
            return Err(TokenError::PatternMismatch.into());
        }
        if !parties.insert(mt.party) {
            return Err(SecAggError::Malformed("duplicate party among masked tokens"));
        }
        for s in &t.members {
            if !members.insert(s.clone()) {
                return Err(TokenError::OverlappingMembers(s.clone()).into());
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
    let stream_set_id = match stream_set {
        Some(id) => id,
        None if !members.is_empty() => StreamSetId::of(&members),
        None => return Err(TokenError::UnknownMembers.into()),
    };
    Ok(TransformationToken {
        window_start: first.token.window_start,
        window_end: first.token.window_end,
        stream_set_id,
        members,
        elements,
        noised: masked.iter().any(|m| m.token.noised),
    })
}
