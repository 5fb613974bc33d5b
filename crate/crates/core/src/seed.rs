//! Seed splitting.
//!
//! Independent streams are derived from a parent seed with SplitMix64:
//! `derive(seed, stream, index) = mix(mix(seed ^ mix(stream)) ^ mix(index + 1))`.
//! Every child gets a distinct, well-mixed 64-bit seed, so parallel workers
//! (trees, profiles, elevators) never share RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream)) ^ mix(index.wrapping_add(1)))
}

pub fn rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}
