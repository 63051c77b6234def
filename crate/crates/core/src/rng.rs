//! Deterministic per-task random streams.
//!
//! Every parallel task (subsample, fold, permutation draw, simulation rep)
//! gets its own generator derived from the user seed and the task's
//! coordinates, so results never depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep streams of different subsystems apart.
pub mod tag {
    pub const RANKING: u64 = 0x5241_4e4b;
    pub const FOLDS: u64 = 0x464f_4c44;
    pub const FORWARD: u64 = 0x4657_4452;
    pub const STABILITY: u64 = 0x5354_4142;
    pub const SIMULATION: u64 = 0x5349_4d55;
    pub const DESIGN: u64 = 0x4445_5347;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of task coordinates into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Generator for the task identified by `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}
