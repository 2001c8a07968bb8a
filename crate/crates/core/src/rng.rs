//! Seeded random streams.
//!
//! Every consumer that needs independent randomness per item (trees,
//! subjects, bootstrap resamples) takes stream `i` of the same seed, so the
//! draws don't depend on which thread runs first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable 64-bit seed for a named stage and item, so every stochastic step
/// gets its own stream from one configured seed.
pub fn derive(seed: u64, stage: &str, item: &str) -> u64 {
    // FNV-1a over the labels, then a splitmix64 finalizer with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes().chain([0xff]).chain(item.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
