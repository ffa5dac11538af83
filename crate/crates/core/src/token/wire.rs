//! Little-endian token encoding:
//!
//! ```text
//! window_start u64 | window_end u64 | stream_set_id [u8; 32]
//! slot_count u16 | pair_count u16 | pair_count x (index u16, value u64)
//! ```
//!
//! Only released slots are sent. Membership and the noised flag stay local.

use std::collections::BTreeSet;

use super::{TokenError, TransformationToken};
use crate::ids::StreamSetId;
use crate::ring_crypto::{RingElement, Timestamp};

pub const HEADER_LEN: usize = 8 + 8 + 32 + 2 + 2;
pub const PAIR_LEN: usize = 2 + 8;

pub fn encoded_len(token: &TransformationToken) -> usize {
    HEADER_LEN + PAIR_LEN * token.released_count()
}

pub fn encode(token: &TransformationToken) -> Result<Vec<u8>, TokenError> {
    let slots = u16::try_from(token.elements.len()).map_err(|_| TokenError::Malformed("too many slots"))?;
    let mut out = Vec::with_capacity(encoded_len(token));
    out.extend_from_slice(&token.window_start.0.to_le_bytes());
    out.extend_from_slice(&token.window_end.0.to_le_bytes());
    out.extend_from_slice(&token.stream_set_id.0);
    out.extend_from_slice(&slots.to_le_bytes());
    out.extend_from_slice(&(token.released_count() as u16).to_le_bytes());
    for (i, e) in token.elements.iter().enumerate() {
        if let Some(v) = e {
            out.extend_from_slice(&(i as u16).to_le_bytes());
            out.extend_from_slice(&v.0.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TransformationToken, TokenError> {
    if bytes.len() < HEADER_LEN {
        return Err(TokenError::Malformed("short header"));
    }
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().unwrap());
    let window_start = Timestamp(u64_at(0));
    let window_end = Timestamp(u64_at(8));
    let stream_set_id = StreamSetId(bytes[16..48].try_into().unwrap());
    let slots = u16_at(48) as usize;
    let pairs = u16_at(50) as usize;
    if bytes.len() != HEADER_LEN + pairs * PAIR_LEN {
        return Err(TokenError::Malformed("length does not match pair count"));
    }
    let mut elements = vec![None; slots];
    for p in 0..pairs {
        let at = HEADER_LEN + p * PAIR_LEN;
        let idx = u16_at(at) as usize;
        let slot = elements.get_mut(idx).ok_or(TokenError::Malformed("index out of range"))?;
        if slot.is_some() {
            return Err(TokenError::Malformed("duplicate index"));
        }
        *slot = Some(RingElement(u64_at(at + 2)));
    }
    Ok(TransformationToken {
        window_start,
        window_end,
        stream_set_id,
        members: BTreeSet::new(),
        elements,
        noised: false,
    })
}
