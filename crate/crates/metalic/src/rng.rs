//! Deterministic named RNG substreams. All randomness in an experiment flows
//! from one top-level seed; substreams are derived by hashing (seed, label)
//! so parallel evaluation order cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes, mixed with the seed.
fn mix(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    // final avalanche (splitmix64 tail)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label))
}

pub fn substream_seed(seed: u64, label: &str) -> u64 {
    mix(seed, label)
}
