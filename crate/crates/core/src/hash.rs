//! Stable hashing used for content addresses and derived seeds.
//!
//! Everything here is a pure function of its byte inputs so that reruns,
//! partial resumes, and different thread counts agree on every seed.

use sha2::{Digest, Sha256};

/// Hex-encoded sha256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derives a 64-bit seed from an ordered list of parts.
///
/// Parts are length-prefixed before hashing so `("ab", "c")` and
/// `("a", "bc")` never collide.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Seed for a single work item of a sampling plan.
pub fn item_seed(plan_seed: u64, case_id: &str, augmentation_index: u32) -> u64 {
    derive_seed(&[b"item", &plan_seed.to_le_bytes(), case_id.as_bytes(), &augmentation_index.to_le_bytes()])
}

/// Seed for retry attempt `attempt` (zero-based) of an LLM request.
pub fn attempt_seed(base_seed: u64, attempt: u32) -> u64 {
    derive_seed(&[b"attempt", &base_seed.to_le_bytes(), &attempt.to_le_bytes()])
}

/// Seed scoped to a named purpose, e.g. one pipeline stage of one test case.
pub fn scoped_seed(master: u64, scope: &str, case_id: &str) -> u64 {
    derive_seed(&[b"scope", &master.to_le_bytes(), scope.as_bytes(), case_id.as_bytes()])
}

/// sha256 of the canonical (sorted-key, compact) JSON encoding of `value`.
pub fn canonical_json_hash(value: &serde_json::Value) -> String {
    // serde_json's default map is a BTreeMap, so keys serialize sorted.
    let bytes = serde_json::to_vec(value).expect("json values always serialize");
    sha256_hex(&bytes)
}
