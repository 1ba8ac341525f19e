//! Seeded, counter-style random streams.
//!
//! Every image row draws from its own ChaCha stream keyed by `(seed, row)`, so
//! results do not depend on how rows are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one row of a seeded image-sized draw.
pub fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Generator for a single global draw.
pub fn global_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) const TAG_MASK: u64 = 1;
pub(crate) const TAG_NOISE: u64 = 2;
pub(crate) const TAG_PATTERN: u64 = 3;
pub(crate) const TAG_CAPTURE: u64 = 4;
pub(crate) const TAG_SYNTH: u64 = 5;
