//! Canonical serialization helpers shared by every config block.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// JSON with object keys sorted, so field order never changes the bytes.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(value).expect("config types serialize to JSON");
    serde_json::to_string(&v).expect("JSON values always print")
}

/// Hex SHA-256 of [`canonical_json`].
pub fn digest<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}
