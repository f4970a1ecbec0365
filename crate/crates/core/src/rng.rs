//! Index-addressed random streams.
//!
//! A stream is identified by a root seed, a domain tag and a path of indices
//! (replicate, resample, ...). Streams are independent of the order in which
//! they are created, so parallel schedules reproduce serial output exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fold(state: u64, value: u64) -> u64 {
    splitmix64(state ^ splitmix64(value))
}

/// Generator for `(seed, domain, path)`.
pub fn stream(seed: u64, domain: &str, path: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for b in domain.bytes() {
        h = fold(h, b as u64);
    }
    h = fold(h, domain.len() as u64);
    for &p in path {
        h = fold(h, p);
    }
    h = fold(h, path.len() as u64);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&fold(h, i as u64).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Seed for a child computation, for APIs that take a plain `u64`.
pub fn child_seed(seed: u64, domain: &str, path: &[u64]) -> u64 {
    use rand::RngCore;
    stream(seed, domain, path).next_u64()
}
