use std::collections::HashMap;
use std::sync::Mutex;

use super::{TokenError, TransformationToken};
use crate::ids::StreamId;
use crate::ring_crypto::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenKey {
    pub stream: StreamId,
    pub attribute: String,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
}

/// Remembers issued non-DP tokens so each (stream attribute, window) yields
/// at most one. Re-requests get the identical token back; a request for a
/// different token over the same window is refused.
#[derive(Debug, Default)]
pub struct TokenStore {
    issued: Mutex<HashMap<TokenKey, TransformationToken>>,
}

impl TokenStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue(&self, key: TokenKey, token: TransformationToken) -> Result<TransformationToken, TokenError> {
        let mut issued = self.issued.lock().unwrap();
        match issued.get(&key) {
            Some(prev) if *prev == token => Ok(prev.clone()),
            Some(_) => Err(TokenError::AlreadyIssued),
            None => {
                issued.insert(key, token.clone());
                Ok(token)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.issued.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
