//! Canonical JSON: object keys sorted, no insignificant whitespace.

use serde::Serialize;

/// Serializes through `serde_json::Value`, whose maps keep keys sorted.
pub fn to_canonical<T: Serialize>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string(&serde_json::to_value(value)?)
}

/// Pretty-printed canonical form for files meant to be read by people.
pub fn to_canonical_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string_pretty(&serde_json::to_value(value)?)
}
