//! Deterministic random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream (the
//! 8-round ChaCha block function used as a counter-mode generator, as
//! implemented by `rand_chacha`). Stream seeds are derived from the master
//! seed and a path of integer tags with the SplitMix64 finalizer
//! (`0x9E3779B97F4A7C15`, `0xBF58476D1CE4E5B9`, `0x94D049BB133111EB`), so a
//! stage, sequence or frame always sees the same stream regardless of what
//! ran before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Tags naming the top-level streams.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const OBJECTNESS_DATA: u64 = 2;
    pub const OBJECTNESS_TRAIN: u64 = 3;
    pub const DOMAIN_TRAIN: u64 = 4;
    pub const ONE_SHOT: u64 = 5;
    pub const ONLINE: u64 = 6;
    pub const TRAIN_SEQUENCES: u64 = 7;
    pub const EVAL_SEQUENCES: u64 = 8;
    pub const TTA: u64 = 9;
    pub const HEAD: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `tags` into `master`, one SplitMix64 round per tag.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(master: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tags))
}
