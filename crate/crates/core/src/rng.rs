//! Seed plumbing: one master seed fans out into independent per-stream seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finaliser; decorrelates nearby (master, index) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `index` under `master`.
pub fn substream_seed(master: u64, index: u64) -> u64 {
    mix(mix(master) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Independent generator for `(master, index)`.
pub fn substream(master: u64, index: u64) -> SimRng {
    rng_from_seed(substream_seed(master, index))
}

/// Named streams used by the simulator, so unrelated consumers of the same
/// master seed never share random numbers.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const FISHER: u64 = 5;
    pub const SPLIT: u64 = 6;
}
