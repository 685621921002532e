//! Counter-based seeding: every random stream is derived from `(seed, key...)`
//! so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of counters into a single 64-bit key.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, keys))
}

/// Stream tags, kept distinct so no two consumers share a stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const TIME: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const DATA: u64 = 7;
}
