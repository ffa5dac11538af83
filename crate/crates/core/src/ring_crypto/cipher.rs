//! Symmetric additively homomorphic stream encryption.
//!
//! An event `m_i` at timestamp `t_i` is encrypted as
//! `c_i = m_i + k(t_i) - k(t_{i-1}) mod M`, where `k(t)` is derived from the
//! stream's master secret with a PRF. Summing a chain of consecutive
//! ciphertexts telescopes the keys, leaving only the two outer keys.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use std::fmt;

use super::prf::{block, Key128, KeyedPrf, PrfKind};
use super::ring::{Modulus, RingElement};
use super::CryptoError;
use crate::ids::{StreamId, StreamSetId};
use crate::token::TransformationToken;

/// Discrete, per-stream strictly increasing event index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A stream's 128-bit master secret. Only producers and the stream's
/// controller hold it; it has no serialized form.
#[derive(Clone, PartialEq, Eq)]
pub struct MasterSecret {
    key: Key128,
    stream_id: StreamId,
}

impl fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MasterSecret")
            .field("stream_id", &self.stream_id)
            .finish_non_exhaustive()
    }
}

impl MasterSecret {
    pub fn new(key: Key128, stream_id: StreamId) -> Self {
        MasterSecret { key, stream_id }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, stream_id: StreamId) -> Self {
        let mut key = [0u8; 16];
        rng.fill_bytes(&mut key);
        MasterSecret { key, stream_id }
    }

    pub fn stream_id(&self) -> &StreamId {
        &self.stream_id
    }

    pub(crate) fn key(&self) -> &Key128 {
        &self.key
    }
}

/// Per-element keys for one timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyVector {
    pub t: Timestamp,
    pub elements: Vec<RingElement>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCiphertext {
    pub t_curr: Timestamp,
    pub t_prev: Timestamp,
    pub body: Vec<RingElement>,
}

impl StreamCiphertext {
    pub fn width(&self) -> usize {
        self.body.len()
    }

    /// Size on the wire: two 64-bit timestamps plus eight bytes per element.
    pub fn wire_len(&self) -> usize {
        16 + 8 * self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.t_curr.0.to_le_bytes());
        out.extend_from_slice(&self.t_prev.0.to_le_bytes());
        for e in &self.body {
            out.extend_from_slice(&e.0.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 16 || !(bytes.len() - 16).is_multiple_of(8) {
            return Err(CryptoError::Malformed(bytes.len()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        Ok(StreamCiphertext {
            t_curr: Timestamp(word(0)),
            t_prev: Timestamp(word(8)),
            body: (16..bytes.len()).step_by(8).map(|i| RingElement(word(i))).collect(),
        })
    }
}

/// How two ciphertexts are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AddMode {
    /// Consecutive ciphertexts of one stream; `b` must start where `a` ends.
    Chain,
    /// Window aggregates of different streams over the same range.
    CrossStream,
}

/// Encryption context: the group modulus and PRF instantiation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCipher {
    pub modulus: Modulus,
    pub prf: PrfKind,
}

impl StreamCipher {
    pub fn new(modulus: Modulus, prf: PrfKind) -> Self {
        StreamCipher { modulus, prf }
    }

    /// Binds a master secret, running the PRF key schedule once.
    pub fn bind(&self, master: &MasterSecret) -> BoundStreamKey {
        BoundStreamKey {
            prf: self.prf.keyed(master.key()),
            modulus: self.modulus,
        }
    }

    /// Element `j` of the result is `PRF(t ‖ j)` reduced mod `M`.
    pub fn derive_key(&self, master: &MasterSecret, t: Timestamp, width: usize) -> KeyVector {
        self.bind(master).derive(t, width)
    }

    pub fn encrypt(
        &self,
        master: &MasterSecret,
        t_prev: Timestamp,
        t_curr: Timestamp,
        message: &[RingElement],
    ) -> Result<StreamCiphertext, CryptoError> {
        self.bind(master).encrypt(t_prev, t_curr, message)
    }

    pub fn add_ciphertexts(
        &self,
        a: &StreamCiphertext,
        b: &StreamCiphertext,
        mode: AddMode,
    ) -> Result<StreamCiphertext, CryptoError> {
        if a.width() != b.width() {
            return Err(CryptoError::WidthMismatch {
                expected: a.width(),
                got: b.width(),
            });
        }
        let (t_prev, t_curr) = match mode {
            AddMode::Chain => {
                if b.t_prev != a.t_curr {
                    return Err(CryptoError::ChainGap {
                        expected: a.t_curr,
                        got: b.t_prev,
                    });
                }
                (a.t_prev, b.t_curr)
            }
            AddMode::CrossStream => {
                if (a.t_prev, a.t_curr) != (b.t_prev, b.t_curr) {
                    return Err(CryptoError::WindowMismatch);
                }
                (a.t_prev, a.t_curr)
            }
        };
        let mut body = a.body.clone();
        self.modulus.add_assign_vec(&mut body, &b.body);
        Ok(StreamCiphertext {
            t_curr,
            t_prev,
            body,
        })
    }

    /// Removes the two outer keys of the window `(t_start, t_end]`, where
    /// `t_start` is the chain origin. A ciphertext that does not cover exactly
    /// this range decrypts to pseudorandom garbage; the scheme is not
    /// authenticated and this cannot be detected here.
    pub fn decrypt_window(
        &self,
        master: &MasterSecret,
        t_start: Timestamp,
        t_end: Timestamp,
        ct: &StreamCiphertext,
    ) -> Vec<RingElement> {
        let key = self.bind(master);
        let k_end = key.derive(t_end, ct.width());
        let k_start = key.derive(t_start, ct.width());
        ct.body
            .iter()
            .zip(k_end.elements.iter().zip(&k_start.elements))
            .map(|(c, (e, s))| self.modulus.add(self.modulus.sub(*c, *e), *s))
            .collect()
    }

    /// Adds a transformation token to a (projected) aggregate. Slots the token
    /// withholds come back as `None`.
    pub fn apply_token(
        &self,
        aggregate: &StreamCiphertext,
        aggregate_streams: &StreamSetId,
        token: &TransformationToken,
    ) -> Result<Vec<Option<RingElement>>, CryptoError> {
        if token.window_start != aggregate.t_prev || token.window_end != aggregate.t_curr {
            return Err(CryptoError::WindowMismatch);
        }
        if token.stream_set_id != *aggregate_streams {
            return Err(CryptoError::StreamSetMismatch);
        }
        if token.elements.len() != aggregate.width() {
            return Err(CryptoError::WidthMismatch {
                expected: aggregate.width(),
                got: token.elements.len(),
            });
        }
        Ok(aggregate
            .body
            .iter()
            .zip(&token.elements)
            .map(|(c, t)| t.map(|t| self.modulus.add(*c, t)))
            .collect())
    }
}

/// A master secret bound to a keyed PRF instance.
#[derive(Clone, Debug)]
pub struct BoundStreamKey {
    prf: KeyedPrf,
    modulus: Modulus,
}

impl BoundStreamKey {
    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn derive(&self, t: Timestamp, width: usize) -> KeyVector {
        KeyVector {
            t,
            elements: (0..width as u64)
                .map(|j| self.modulus.reduce_u128(self.prf.eval(block(t.0, j))))
                .collect(),
        }
    }

    pub fn encrypt(
        &self,
        t_prev: Timestamp,
        t_curr: Timestamp,
        message: &[RingElement],
    ) -> Result<StreamCiphertext, CryptoError> {
        let k_curr = self.derive(t_curr, message.len());
        let k_prev = self.derive(t_prev, message.len());
        self.encrypt_with_keys(&k_prev, &k_curr, message)
    }

    /// Encrypts with already derived keys; producers reuse `k_curr` of one
    /// event as `k_prev` of the next.
    pub fn encrypt_with_keys(
        &self,
        k_prev: &KeyVector,
        k_curr: &KeyVector,
        message: &[RingElement],
    ) -> Result<StreamCiphertext, CryptoError> {
        if k_prev.t >= k_curr.t {
            return Err(CryptoError::NonMonotonic {
                prev: k_prev.t,
                curr: k_curr.t,
            });
        }
        for len in [k_prev.elements.len(), k_curr.elements.len()] {
            if len != message.len() {
                return Err(CryptoError::WidthMismatch {
                    expected: message.len(),
                    got: len,
                });
            }
        }
        let m = self.modulus;
        let body = message
            .iter()
            .zip(k_curr.elements.iter().zip(&k_prev.elements))
            .map(|(x, (kc, kp))| m.sub(m.add(m.reduce(x.0), *kc), *kp))
            .collect();
        Ok(StreamCiphertext {
            t_curr: k_curr.t,
            t_prev: k_prev.t,
            body,
        })
    }
}
