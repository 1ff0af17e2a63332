//! Deterministic RNG streams.
//!
//! Every source of randomness in the crate draws from a ChaCha stream derived
//! from `(seed, label, parts)`. Streams are stateless functions of their key,
//! so resuming a run at epoch `k` replays exactly the draws the original run
//! made at epoch `k`, and parallel consumers cannot perturb each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 finalizer
    h = h.wrapping_add(v).wrapping_add(0x9e3779b97f4a7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// RNG stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    substream(seed, label, &[])
}

/// RNG stream for `(seed, label, parts)`, e.g. per-epoch or per-sample.
pub fn substream(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut s = fnv1a(label.as_bytes());
    for &p in parts {
        s = mix(s, p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "data").gen();
        let b: u64 = stream(7, "data").gen();
        let c: u64 = stream(7, "init").gen();
        let d: u64 = stream(8, "data").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn substreams_differ_by_parts() {
        let a: u64 = substream(1, "epoch", &[0]).gen();
        let b: u64 = substream(1, "epoch", &[1]).gen();
        assert_ne!(a, b);
    }
}
