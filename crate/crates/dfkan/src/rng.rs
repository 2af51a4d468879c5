//! Deterministic seed derivation for named RNG streams.
//!
//! Every stochastic component (layer init, shuffling, dropout masks, noise
//! injection) draws from its own ChaCha stream whose seed is mixed from the
//! global seed plus integer tags, so independent components never share a
//! stream and runs are reproducible bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x00d1_f35c_2a9e_4477u64);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    state
}

/// ChaCha stream for a derived seed.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
