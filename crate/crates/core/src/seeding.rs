//! Seed derivation. Every random stream in the laboratory is derived from a
//! root seed, a key and a purpose string; nothing reads a global RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type LabRng = ChaCha8Rng;

/// Stable hash of `(root, key, purpose)` into a 64-bit seed.
pub fn derive_seed(root: u64, key: &[u64], purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((key.len() as u64).to_le_bytes());
    for k in key {
        h.update(k.to_le_bytes());
    }
    h.update(purpose.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based stream for term `(i, r)`: the same `(seed, i, r)` always
/// yields the same draws, independent of evaluation order.
pub fn term_rng(seed: u64, i: usize, r: usize) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((i as u64) << 32) ^ r as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, &[1, 2, 3], "train");
        assert_eq!(a, derive_seed(7, &[1, 2, 3], "train"));
        assert_ne!(a, derive_seed(7, &[1, 2, 3], "eval"));
        assert_ne!(a, derive_seed(8, &[1, 2, 3], "train"));
        assert_ne!(derive_seed(7, &[1, 23], "x"), derive_seed(7, &[12, 3], "x"));
    }

    #[test]
    fn term_streams() {
        let x: f64 = term_rng(5, 3, 4).random();
        let y: f64 = term_rng(5, 3, 4).random();
        let z: f64 = term_rng(5, 4, 3).random();
        assert_eq!(x, y);
        assert_ne!(x, z);
    }
}
