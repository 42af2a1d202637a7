//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a short path
//! of coordinates (stage tag, grid values, counters). Streams never depend on
//! the position of a value inside a grid, so growing a grid leaves existing
//! points untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the pipeline stages.
pub mod tag {
    pub const DATA: u64 = 0x6461_7461;
    pub const SPLIT: u64 = 0x7370_6c74;
    pub const INIT: u64 = 0x696e_6974;
    pub const TRAIN: u64 = 0x7472_6e00;
    pub const CALIBRATE: u64 = 0x6361_6c00;
    pub const TEST: u64 = 0x7465_7374;
    pub const RUN: u64 = 0x7275_6e00;
}

/// The SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold `path` into `master`, one coordinate at a time.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(master), |acc, &c| mix64(acc ^ mix64(c)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(master, path))
}
