//! Shared value and checksum primitives used across the platform.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Project-wide digest algorithm name, recorded alongside stored digests.
pub const DIGEST_ALGORITHM: &str = "sha256";

/// Hex-encoded SHA-256 over raw bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Digest of the canonical JSON encoding of a serializable value.
///
/// `serde_json` maps are key-sorted by default, so `to_vec` of a
/// `serde_json::Value` is already canonical.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    digest_bytes(&serde_json::to_vec(&v).expect("encodable"))
}

/// A value carried by a data token: inline JSON, a datastore object id,
/// a site-local file, or the null marker substituted by the IGNORE
/// failure policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenValue {
    Null,
    Inline { value: serde_json::Value },
    Object { oid: String },
    File { site: String, path: String, checksum: String, bytes: u64 },
}

impl TokenValue {
    pub fn inline(v: impl Into<serde_json::Value>) -> Self {
        TokenValue::Inline { value: v.into() }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, TokenValue::Null)
    }

    /// Approximate payload size in bytes, used by locality scoring.
    pub fn size_bytes(&self) -> u64 {
        match self {
            TokenValue::Null => 0,
            TokenValue::Inline { value } => serde_json::to_vec(value).map(|v| v.len() as u64).unwrap_or(0),
            TokenValue::Object { .. } => 0, // resolved through the datastore
            TokenValue::File { bytes, .. } => *bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_key_order_independent() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(digest_json(&a), digest_json(&b));
        assert_eq!(digest_bytes(b"abc").len(), 64);
    }
}
