//! Keyed, counter-based random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(seed, tag, keys...)`, so any sample can be regenerated in isolation and
//! generation order never affects results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a 64-bit key from a seed, a stream tag and a list of counters.
pub fn derive_key(seed: u64, tag: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(tag));
    for &k in keys {
        h = splitmix(h ^ k.wrapping_mul(GOLDEN));
    }
    h
}

pub fn stream(seed: u64, tag: &str, keys: &[u64]) -> Stream {
    let mut bytes = [0u8; 32];
    let mut h = derive_key(seed, tag, keys);
    for chunk in bytes.chunks_mut(8) {
        h = splitmix(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
