//! Stable 64-bit hashing (FNV-1a).
//!
//! Used wherever a digest must stay identical across runs, machines and
//! compiler versions: enhancement-cache keys, toy-encoder token seeds and
//! checkpoint fingerprints. `std::hash` offers no such stability guarantee.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a over a string, rendered as fixed-width lowercase hex.
pub fn fnv1a64_hex(text: &str) -> String {
    format!("{:016x}", fnv1a64(text.as_bytes()))
}
