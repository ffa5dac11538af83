//! Keyed pseudorandom functions with 128-bit input and output blocks.
//!
//! Inputs and outputs are big-endian `u128` views of the 16-byte block, so
//! `PRF(t ‖ j)` is the block whose first eight bytes hold `t` and last eight
//! hold `j`.

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// 128-bit PRF key.
pub type Key128 = [u8; 16];

/// Selects a PRF instantiation.
///
/// `Aes128` is the production choice. The remaining kinds are deterministic
/// stand-ins for tests and large operation-count runs; they are not
/// pseudorandom in any cryptographic sense.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrfKind {
    #[default]
    Aes128,
    /// Fast keyed mixing function (splitmix-style finalizer).
    Mix,
    /// `PRF(t ‖ j) = 1000 * t + j`, ignoring the key.
    Counter,
    /// Always zero.
    Zero,
}

impl FromStr for PrfKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aes" | "aes128" => Ok(PrfKind::Aes128),
            "mix" | "stub" => Ok(PrfKind::Mix),
            "counter" => Ok(PrfKind::Counter),
            "zero" => Ok(PrfKind::Zero),
            other => Err(format!("unknown prf kind `{other}`")),
        }
    }
}

impl fmt::Display for PrfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrfKind::Aes128 => "aes128",
            PrfKind::Mix => "mix",
            PrfKind::Counter => "counter",
            PrfKind::Zero => "zero",
        })
    }
}

impl PrfKind {
    /// Binds a key, running the key schedule once.
    pub fn keyed(self, key: &Key128) -> KeyedPrf {
        match self {
            PrfKind::Aes128 => KeyedPrf::Aes(Box::new(Aes128::new(GenericArray::from_slice(key)))),
            PrfKind::Mix => {
                let lo = u64::from_le_bytes(key[..8].try_into().unwrap());
                let hi = u64::from_le_bytes(key[8..].try_into().unwrap());
                KeyedPrf::Mix(lo, hi)
            }
            PrfKind::Counter => KeyedPrf::Counter,
            PrfKind::Zero => KeyedPrf::Zero,
        }
    }
}

#[derive(Clone)]
pub enum KeyedPrf {
    Aes(Box<Aes128>),
    Mix(u64, u64),
    Counter,
    Zero,
}

impl fmt::Debug for KeyedPrf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // never print key material
        let name = match self {
            KeyedPrf::Aes(_) => "Aes128",
            KeyedPrf::Mix(..) => "Mix",
            KeyedPrf::Counter => "Counter",
            KeyedPrf::Zero => "Zero",
        };
        write!(f, "KeyedPrf::{name}")
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl KeyedPrf {
    pub fn eval(&self, input: u128) -> u128 {
        match self {
            KeyedPrf::Aes(cipher) => {
                let mut block = GenericArray::from(input.to_be_bytes());
                cipher.encrypt_block(&mut block);
                u128::from_be_bytes(block.into())
            }
            KeyedPrf::Mix(k0, k1) => {
                let hi_in = (input >> 64) as u64;
                let lo_in = input as u64;
                let a = mix64(k0 ^ mix64(hi_in.wrapping_add(0x9e37_79b9_7f4a_7c15)));
                let b = mix64(k1 ^ a ^ mix64(lo_in ^ 0xd6e8_feb8_6659_fd93));
                let c = mix64(b ^ k0.rotate_left(17) ^ lo_in);
                ((c as u128) << 64) | b as u128
            }
            KeyedPrf::Counter => {
                let t = input >> 64;
                let j = input & u64::MAX as u128;
                t.wrapping_mul(1000).wrapping_add(j)
            }
            KeyedPrf::Zero => 0,
        }
    }
}

/// Packs `(hi ‖ lo)` into a PRF input block.
pub fn block(hi: u64, lo: u64) -> u128 {
    ((hi as u128) << 64) | lo as u128
}
