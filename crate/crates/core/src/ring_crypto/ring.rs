//! Arithmetic in the message and key ring `Z_M` for power-of-two `M`.

use serde::{Deserialize, Serialize};
use std::fmt;

use super::CryptoError;

/// An element of `Z_M`. The wrapped value is always reduced by the [`Modulus`]
/// that produced it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RingElement(pub u64);

impl RingElement {
    pub const ZERO: RingElement = RingElement(0);

    pub fn value(self) -> u64 {
        self.0
    }
}

impl From<u64> for RingElement {
    fn from(v: u64) -> Self {
        RingElement(v)
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A power-of-two group modulus `M = 2^bits` with `1 <= bits <= 64`.
///
/// Restricting to powers of two lets every operation wrap in `u64` and then
/// mask, and lets a 128-bit PRF output be reduced by truncation without bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Modulus {
    bits: u32,
}

impl Modulus {
    /// `2^64`.
    pub const DEFAULT: Modulus = Modulus { bits: 64 };
}

impl Default for Modulus {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<u32> for Modulus {
    type Error = CryptoError;

    fn try_from(bits: u32) -> Result<Self, Self::Error> {
        Modulus::pow2(bits)
    }
}

impl From<Modulus> for u32 {
    fn from(m: Modulus) -> u32 {
        m.bits
    }
}

impl Modulus {
    pub fn pow2(bits: u32) -> Result<Self, CryptoError> {
        if (1..=64).contains(&bits) {
            Ok(Modulus { bits })
        } else {
            Err(CryptoError::InvalidModulus(bits))
        }
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    fn mask(self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    /// `M / 2`, the threshold above which a value is read as negative.
    pub fn half(self) -> u64 {
        1u64 << (self.bits - 1)
    }

    /// The largest representable value, `M - 1`.
    pub fn max_value(self) -> u64 {
        self.mask()
    }

    pub fn reduce(self, v: u64) -> RingElement {
        RingElement(v & self.mask())
    }

    /// Reduces a full PRF block by keeping its low bits.
    pub fn reduce_u128(self, v: u128) -> RingElement {
        self.reduce(v as u64)
    }

    pub fn add(self, a: RingElement, b: RingElement) -> RingElement {
        self.reduce(a.0.wrapping_add(b.0))
    }

    pub fn sub(self, a: RingElement, b: RingElement) -> RingElement {
        self.reduce(a.0.wrapping_sub(b.0))
    }

    pub fn neg(self, a: RingElement) -> RingElement {
        self.reduce(a.0.wrapping_neg())
    }

    /// Maps a signed integer into the ring (two's complement modulo `M`).
    pub fn from_i64(self, v: i64) -> RingElement {
        self.reduce(v as u64)
    }

    /// Interprets an element as a signed value in `[-M/2, M/2)`.
    pub fn to_i128(self, a: RingElement) -> i128 {
        let v = a.0 & self.mask();
        if v >= self.half() {
            v as i128 - (self.mask() as i128 + 1)
        } else {
            v as i128
        }
    }

    pub fn add_assign_vec(self, acc: &mut [RingElement], other: &[RingElement]) {
        for (a, b) in acc.iter_mut().zip(other) {
            *a = self.add(*a, *b);
        }
    }

    pub fn sub_assign_vec(self, acc: &mut [RingElement], other: &[RingElement]) {
        for (a, b) in acc.iter_mut().zip(other) {
            *a = self.sub(*a, *b);
        }
    }

    pub fn sum<I: IntoIterator<Item = RingElement>>(self, items: I) -> RingElement {
        items
            .into_iter()
            .fold(RingElement::ZERO, |acc, x| self.add(acc, x))
    }
}
