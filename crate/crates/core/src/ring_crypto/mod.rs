//! Ring arithmetic, PRF-based key derivation, and the additively homomorphic
//! stream cipher.

mod cipher;
pub mod prf;
mod ring;

pub use cipher::{
    AddMode, BoundStreamKey, KeyVector, MasterSecret, StreamCipher, StreamCiphertext, Timestamp,
};
pub use prf::{Key128, KeyedPrf, PrfKind};
pub use ring::{Modulus, RingElement};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("modulus must be 2^k with 1 <= k <= 64, got k = {0}")]
    InvalidModulus(u32),

    #[error("timestamps must increase: t_prev = {prev}, t_curr = {curr}")]
    NonMonotonic { prev: Timestamp, curr: Timestamp },

    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("chaining gap: expected t_prev = {expected}, got {got}")]
    ChainGap { expected: Timestamp, got: Timestamp },

    #[error("window range of token and aggregate differ")]
    WindowMismatch,

    #[error("token was issued for a different stream set")]
    StreamSetMismatch,

    #[error("malformed ciphertext of {0} bytes")]
    Malformed(usize),
}
