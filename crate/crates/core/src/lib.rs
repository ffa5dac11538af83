//! Cryptographic enforcement of privacy policies over encrypted event
//! streams.
//!
//! Producers encrypt events once with an additively homomorphic stream
//! cipher ([`ring_crypto`]) over aggregatable encodings ([`encoding`]).
//! Privacy controllers authorize a transformation by emitting a
//! [`token::TransformationToken`]; across trust domains the tokens are
//! combined with canceling masks ([`secure_agg`]). The [`policy`] module
//! matches queries against stream annotations, and [`sim`] runs the whole
//! deployment in-process.

pub mod encoding;
pub mod ids;
pub mod policy;
pub mod ring_crypto;
pub mod secure_agg;
pub mod sim;
pub mod token;
