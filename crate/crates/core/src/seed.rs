//! Derivation of independent RNG streams from the single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream tags used when deriving seeds, so unrelated consumers of the run
/// seed never share a stream.
pub mod stream {
    pub const FOLDS: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SUBSAMPLE: u64 = 5;
}

/// Hashes `base` together with `parts` into a new 64-bit seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_distinct() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[]), derive_seed(2, &[]));
    }
}
