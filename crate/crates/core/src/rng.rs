//! Independent, addressable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_IDENTITY: u64 = 1;
pub const TAG_SAMPLE: u64 = 2;
pub const TAG_RATIO: u64 = 3;
pub const TAG_FOLD: u64 = 4;
pub const TAG_PAIRS: u64 = 5;
pub const TAG_LABELS: u64 = 6;
pub const TAG_SAMPLER: u64 = 7;

/// Stream `index` of the family `(seed, tag)`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
