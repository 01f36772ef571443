//! Small shared helpers: stable hashing and seed derivation.

/// FNV-1a over bytes. Used for feature hashing and seed derivation; must
/// stay stable across releases because hashed features are part of model
/// checkpoints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives a sub-seed for one purpose from the single user-facing seed.
/// Every random stream in the engine is keyed as (seed, purpose label), so
/// adding a new stream never perturbs existing ones.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    fnv1a64(label.as_bytes()) ^ base.wrapping_mul(0x9e3779b97f4a7c15)
}
