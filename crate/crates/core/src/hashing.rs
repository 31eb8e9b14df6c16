//! Content hashing and seed derivation.
//!
//! Every random stream in the engine is a ChaCha20 generator keyed by the
//! SHA-256 digest of a tagged tuple of parts, so streams are portable and
//! independent of iteration or thread order.

use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex-encoded SHA-256 over length-prefixed parts, so `["ab", "c"]` and
/// `["a", "bc"]` never collide.
pub fn hash_parts<I, P>(parts: I) -> String
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    hex::encode(digest_parts(parts))
}

fn digest_parts<I, P>(parts: I) -> [u8; 32]
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let part = part.as_ref();
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Derive a 64-bit seed from a base seed and a list of labels.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let base = base.to_le_bytes();
    let digest = digest_parts(std::iter::once(&base[..]).chain(labels.iter().map(|l| l.as_bytes())));
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// ChaCha20 stream keyed by `(seed, labels...)`.
pub fn substream(seed: u64, labels: &[&str]) -> ChaCha20Rng {
    let base = seed.to_le_bytes();
    let digest = digest_parts(std::iter::once(&base[..]).chain(labels.iter().map(|l| l.as_bytes())));
    ChaCha20Rng::from_seed(digest)
}

/// Map a key to `[0, 1)` deterministically.
pub fn unit_interval(key: &str) -> f64 {
    let digest = Sha256::digest(key.as_bytes());
    let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// 64-bit FNV-1a, used by the stub embedders for feature hashing.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parts_are_length_prefixed() {
        assert_ne!(hash_parts(["ab", "c"]), hash_parts(["a", "bc"]));
        assert_eq!(hash_parts(["a", "bc"]), hash_parts(["a", "bc"]));
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let a: u64 = substream(7, &["q1"]).random();
        let b: u64 = substream(7, &["q1"]).random();
        let c: u64 = substream(7, &["q2"]).random();
        let d: u64 = substream(8, &["q1"]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn unit_interval_in_range() {
        for i in 0..100 {
            let u = unit_interval(&format!("q{i}"));
            assert!((0.0..1.0).contains(&u));
        }
    }
}
