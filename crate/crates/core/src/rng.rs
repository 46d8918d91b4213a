//! Seeding conventions.
//!
//! Every stochastic routine takes an explicit `u64` seed and builds a
//! [`ChaCha12Rng`] from it. ChaCha output is specified bit-for-bit, so a
//! given seed reproduces the same stream on every platform. Independent
//! sub-streams (one per replication, one per fold split, ...) use the ChaCha
//! stream counter rather than ad hoc seed arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Generator for `seed`, stream 0.
pub fn rng(seed: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Generator for `seed` on an independent ChaCha stream.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha12Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// SplitMix64 finalizer, used to derive child seeds from `(seed, tag)`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
