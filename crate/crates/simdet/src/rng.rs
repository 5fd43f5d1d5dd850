//! Deterministic seed derivation and random sources.
//!
//! Every generator in the crate is a pure function of its seeds. Streams for
//! sub-tasks are derived by hashing `(base, tag, index)` so that adding or
//! reordering consumers never disturbs unrelated streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the base seed, a purpose tag and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for &b in base.to_le_bytes().iter().chain(tag.as_bytes()).chain(index.to_le_bytes().iter()) {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_derived(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    rng_from(derive_seed(base, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
    }

    #[test]
    fn identical_seeds_yield_identical_streams() {
        let a: Vec<f64> = (0..8).map({ let mut r = rng_from(7); move |_| r.gen() }).collect();
        let b: Vec<f64> = (0..8).map({ let mut r = rng_from(7); move |_| r.gen() }).collect();
        assert_eq!(a, b);
    }
}
