//! Pairwise secret setup between privacy controllers.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt;
use x25519_dalek::{PublicKey, StaticSecret};

use super::SecAggError;
use crate::ids::PartyId;
use crate::ring_crypto::Key128;

/// Key-agreement primitive behind [`setup_pairwise`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyAgreement {
    /// Elliptic-curve Diffie-Hellman over Curve25519.
    #[default]
    X25519,
    /// Test double: the "shared secret" is a hash of both public keys, so
    /// anyone can compute it. Only for fast, reproducible simulations.
    Deterministic,
}

pub const PUBLIC_KEY_LEN: usize = 32;

#[derive(Clone)]
pub struct PartyKeypair {
    agreement: KeyAgreement,
    secret: [u8; 32],
    public: [u8; PUBLIC_KEY_LEN],
}

impl fmt::Debug for PartyKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartyKeypair")
            .field("agreement", &self.agreement)
            .field("id", &self.id())
            .finish_non_exhaustive()
    }
}

impl PartyKeypair {
    pub fn generate<R: RngCore + CryptoRng>(agreement: KeyAgreement, rng: &mut R) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self::from_secret(agreement, secret)
    }

    pub fn from_secret(agreement: KeyAgreement, secret: [u8; 32]) -> Self {
        let public = match agreement {
            KeyAgreement::X25519 => PublicKey::from(&StaticSecret::from(secret)).to_bytes(),
            KeyAgreement::Deterministic => {
                let mut h = Sha256::new();
                h.update(b"deterministic-public");
                h.update(secret);
                h.finalize().into()
            }
        };
        PartyKeypair {
            agreement,
            secret,
            public,
        }
    }

    pub fn agreement(&self) -> KeyAgreement {
        self.agreement
    }

    pub fn public_key(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.public
    }

    pub fn id(&self) -> PartyId {
        PartyId::from_public_key(&self.public)
    }

    fn shared_point(&self, peer_public: &[u8; PUBLIC_KEY_LEN]) -> [u8; 32] {
        match self.agreement {
            KeyAgreement::X25519 => StaticSecret::from(self.secret)
                .diffie_hellman(&PublicKey::from(*peer_public))
                .to_bytes(),
            KeyAgreement::Deterministic => {
                let (a, b) = if self.public <= *peer_public {
                    (self.public, *peer_public)
                } else {
                    (*peer_public, self.public)
                };
                let mut h = Sha256::new();
                h.update(b"deterministic-shared");
                h.update(a);
                h.update(b);
                h.finalize().into()
            }
        }
    }
}

/// Stand-in for a PKI: maps identities to their public keys.
#[derive(Clone, Debug, Default)]
pub struct IdentityRegistry {
    keys: HashMap<PartyId, [u8; PUBLIC_KEY_LEN]>,
}

impl IdentityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, public_key: [u8; PUBLIC_KEY_LEN]) -> PartyId {
        let id = PartyId::from_public_key(&public_key);
        self.keys.insert(id, public_key);
        id
    }

    pub fn lookup(&self, id: &PartyId) -> Option<&[u8; PUBLIC_KEY_LEN]> {
        self.keys.get(id)
    }

    pub fn contains(&self, id: &PartyId) -> bool {
        self.keys.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// A 128-bit secret shared with one peer. Both endpoints derive the same
/// value.
#[derive(Clone, PartialEq, Eq)]
pub struct PairwiseSecret {
    pub peer: PartyId,
    pub secret: Key128,
}

impl fmt::Debug for PairwiseSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PairwiseSecret")
            .field("peer", &self.peer)
            .finish_non_exhaustive()
    }
}

/// Runs one key agreement per peer and hashes the shared point together
/// with both identities into a PRF key.
pub fn setup_pairwise(
    me: &PartyKeypair,
    peers: &[PartyId],
    registry: &IdentityRegistry,
) -> Result<Vec<PairwiseSecret>, SecAggError> {
    let my_id = me.id();
    peers
        .iter()
        .filter(|p| **p != my_id)
        .map(|peer| {
            let pk = registry.lookup(peer).ok_or(SecAggError::UnknownPeer(*peer))?;
            let shared = me.shared_point(pk);
            let (lo, hi) = if my_id < *peer { (my_id, *peer) } else { (*peer, my_id) };
            let mut h = Sha256::new();
            h.update(b"pairwise-secret");
            h.update(shared);
            h.update(lo.0);
            h.update(hi.0);
            let digest = h.finalize();
            Ok(PairwiseSecret {
                peer: *peer,
                secret: digest[..16].try_into().unwrap(),
            })
        })
        .collect()
}

/// Bytes one controller sends during setup: its public key and identity to
/// each of its `peers` peers.
pub fn setup_bytes_per_controller(peers: usize) -> u64 {
    (peers * (PUBLIC_KEY_LEN + 32)) as u64
}
