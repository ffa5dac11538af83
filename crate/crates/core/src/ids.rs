//! Identifiers shared across modules.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;

/// Opaque identifier of a data stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub String);

impl StreamId {
    pub fn new(s: impl Into<String>) -> Self {
        StreamId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// SHA-256 of the id; used for deterministic tie-breaking.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.0.as_bytes()).into()
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StreamId {
    fn from(s: &str) -> Self {
        StreamId(s.to_owned())
    }
}

/// Canonical hash of a set of stream ids.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamSetId(pub [u8; 32]);

impl StreamSetId {
    pub fn of<'a, I: IntoIterator<Item = &'a StreamId>>(ids: I) -> Self {
        let sorted: BTreeSet<&StreamId> = ids.into_iter().collect();
        let mut h = Sha256::new();
        h.update((sorted.len() as u64).to_le_bytes());
        for id in sorted {
            h.update((id.0.len() as u64).to_le_bytes());
            h.update(id.0.as_bytes());
        }
        StreamSetId(h.finalize().into())
    }

    pub fn single(id: &StreamId) -> Self {
        Self::of(std::iter::once(id))
    }
}

impl fmt::Debug for StreamSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StreamSetId({})", &hex::encode(self.0)[..16])
    }
}

/// 32-byte party identity (hash of a public key), ordered by numeric value.
/// Serialized as a hex string.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartyId(pub [u8; 32]);

impl PartyId {
    pub fn from_public_key(pk: &[u8]) -> Self {
        PartyId(Sha256::digest(pk).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(PartyId(bytes.try_into().ok()?))
    }
}

impl Serialize for PartyId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PartyId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PartyId::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

impl fmt::Debug for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PartyId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}
